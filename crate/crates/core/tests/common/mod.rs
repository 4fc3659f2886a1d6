//! Shared fixture: the default run config against the committed checkpoints.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use wmlab::harness::{Lab, RunConfig};
use wmlab::watermark::Payload;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Default config with the repository's checkpoint cache. Missing models are
/// trained (slow) and cached there.
pub fn default_config() -> RunConfig {
    RunConfig { checkpoint_dir: repo_root().join("checkpoints"), ..RunConfig::default() }
}

/// Default lab with both codecs; the diffusion model is not loaded.
pub fn codec_lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let _ = env_logger::builder().is_test(true).try_init();
        Lab::prepare(&default_config()).expect("prepare default lab")
    })
}

/// Default lab with every codec and the diffusion model loaded.
pub fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let _ = env_logger::builder().is_test(true).try_init();
        let mut lab = Lab::prepare(&default_config()).expect("prepare default lab");
        lab.ensure_model().expect("diffusion model");
        lab
    })
}

pub fn bit_accuracy(truth: &Payload, decoded: &Payload) -> f64 {
    truth.bits().iter().zip(decoded.bits()).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}
