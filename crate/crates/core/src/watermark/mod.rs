//! Watermark codecs and the decoder interface the guided attack targets.

pub mod learned;
mod payload;
pub mod ss;

pub use payload::{Payload, WatermarkKey};

use crate::error::Result;
use crate::image::{ImageGrid, PixelField};

/// A decoder the attacks and the harness can query and differentiate.
pub trait WatermarkDecoder: Send + Sync {
    fn name(&self) -> &str;
    fn payload_length(&self) -> usize;
    /// `(height, width)` the decoder expects.
    fn image_size(&self) -> (usize, usize);
    fn decode(&self, image: &ImageGrid) -> Result<Payload>;
    /// Gradient of the guidance loss toward `target`, with respect to the
    /// normalised image `y = 2x − 1`.
    fn guidance_gradient(&self, image: &ImageGrid, target: &Payload) -> Result<PixelField>;
}

/// A decoder that can also embed.
pub trait WatermarkCodec: WatermarkDecoder {
    fn embed(&self, image: &ImageGrid, payload: &Payload) -> Result<ImageGrid>;
}

impl WatermarkCodec for ss::SsCodec {
    fn embed(&self, image: &ImageGrid, payload: &Payload) -> Result<ImageGrid> {
        ss::SsCodec::embed(self, image, payload)
    }
}

impl WatermarkCodec for learned::LearnedCodec {
    fn embed(&self, image: &ImageGrid, payload: &Payload) -> Result<ImageGrid> {
        learned::LearnedCodec::embed(self, image, payload)
    }
}
