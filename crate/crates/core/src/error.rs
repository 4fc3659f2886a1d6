use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty corpus: no readable images in {0}")]
    EmptyCorpus(PathBuf),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("watermark capacity exceeded: need {needed} coefficients, band holds {available}")]
    Capacity { needed: usize, available: usize },
    #[error("payload length mismatch: expected {expected}, got {got}")]
    PayloadLength { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("codec under-trained: held-out identity bit accuracy {accuracy:.4} below {required:.2}")]
    CodecUnderTrained { accuracy: f64, required: f64 },
    #[error("model under-trained: regeneration PSNR {psnr_db:.2} dB below {required_db:.2} dB")]
    ModelUnderTrained { psnr_db: f64, required_db: f64 },
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("estimator error: {0}")]
    Estimator(String),
    #[error("image codec error: {0}")]
    ImageCodec(#[from] image::ImageError),
    #[error("plot error: {0}")]
    Plot(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
