//! Run configuration, read from TOML with nested sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::diffusion::DdpmConfig;
use crate::error::{LabError, Result};
use crate::rng::derive_seed;
use crate::watermark::learned::LearnedCodecConfig;
use crate::watermark::ss::SsConfig;
use crate::watermark::WatermarkKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Ss,
    Learned,
}

impl CodecKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CodecKind::Ss => "ss",
            CodecKind::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(CodecKind::Ss),
            "learned" => Ok(CodecKind::Learned),
            other => Err(LabError::Config(format!("unknown codec {other:?} (expected ss or learned)"))),
        }
    }
}

/// Where images come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    /// Image directory; the built-in synthetic generator when absent.
    pub dir: Option<PathBuf>,
    pub synthetic_count: usize,
    /// Every image is resized to `image_size × image_size`. Overrides the
    /// image size of the codec and diffusion sections.
    pub image_size: usize,
    pub test_count: usize,
    /// Evaluate only the first `eval_limit` test images.
    pub eval_limit: Option<usize>,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self { dir: None, synthetic_count: 4100, image_size: 32, test_count: 100, eval_limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSettings {
    pub enabled: Vec<CodecKind>,
    /// Spread-spectrum key; derived from the master seed when absent.
    pub ss_key: Option<u64>,
    pub ss: SsConfig,
    pub learned: LearnedCodecConfig,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self {
            enabled: vec![CodecKind::Ss, CodecKind::Learned],
            ss_key: None,
            ss: SsConfig::default(),
            learned: LearnedCodecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    /// Evaluation grid. The identity attack is always evaluated first.
    pub grid: Vec<AttackSpec>,
    pub sweep_strengths: Vec<f64>,
    /// Strengths of the analytic-vs-empirical MI comparison.
    pub dpi_strengths: Vec<f64>,
    /// Noise seed shared by the regeneration and guided sweep curves.
    pub sweep_seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            sweep_strengths: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4],
            dpi_strengths: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            sweep_seed: 0,
        }
    }
}

/// The six summary columns: no attack, three distortions, two diffusion attacks.
pub fn default_grid() -> Vec<AttackSpec> {
    vec![
        AttackSpec::Identity,
        AttackSpec::JpegLike { quality: 50 },
        AttackSpec::Crop { area_fraction: 0.1 },
        AttackSpec::GaussianNoise { sigma_255: 10.0, seed: 0 },
        AttackSpec::Regeneration { strength: 0.3, seed: 0 },
        AttackSpec::GuidedRemoval { strength: 0.3, lambda_weight: 0.5, gradient_steps: 1, target_hex: None, seed: 0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: corpus generation, split, payloads, training and attack
    /// noise all derive from it.
    pub seed: u64,
    /// Payload length of every codec.
    pub payload_length: usize,
    pub out: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Train missing models instead of failing.
    pub train_if_missing: bool,
    pub corpus: CorpusSettings,
    pub codec: CodecSettings,
    pub diffusion: DdpmConfig,
    pub attacks: AttackSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            payload_length: 16,
            out: PathBuf::from("runs/default"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_if_missing: true,
            corpus: CorpusSettings::default(),
            codec: CodecSettings::default(),
            diffusion: DdpmConfig::default(),
            attacks: AttackSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Copies the shared settings (payload length, image size) into the
    /// codec and diffusion sections, then validates the whole config.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.codec.ss.payload_length = c.payload_length;
        c.codec.learned.payload_length = c.payload_length;
        c.codec.learned.image_size = c.corpus.image_size;
        c.diffusion.image_size = c.corpus.image_size;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.codec.enabled.is_empty() {
            return bad("no codec enabled".into());
        }
        let mut kinds = self.codec.enabled.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.codec.enabled.len() {
            return bad("codec listed twice".into());
        }
        if self.corpus.dir.is_none() && self.corpus.synthetic_count <= self.corpus.test_count {
            return bad(format!(
                "synthetic corpus of {} images leaves no training images after {} test images",
                self.corpus.synthetic_count, self.corpus.test_count
            ));
        }
        if self.corpus.test_count == 0 {
            return bad("test_count must be ≥ 1".into());
        }
        self.codec.learned.validate()?;
        self.diffusion.validate()?;
        for (i, a) in self.attacks.grid.iter().enumerate() {
            a.validate()?;
            if self.attacks.grid[..i].contains(a) {
                return bad(format!("attack {} {} listed twice", a.kind(), a.params_json()));
            }
        }
        for s in self.attacks.sweep_strengths.iter().chain(&self.attacks.dpi_strengths) {
            if !(0.0..=1.0).contains(s) {
                return bad(format!("strength {s} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn ss_key(&self) -> WatermarkKey {
        WatermarkKey(self.codec.ss_key.unwrap_or_else(|| derive_seed(self.seed, "ss-key", 0)))
    }

    /// The evaluated attack list: identity first, then the grid in order.
    pub fn attack_grid(&self) -> Vec<AttackSpec> {
        let mut grid = vec![AttackSpec::Identity];
        grid.extend(self.attacks.grid.iter().filter(|a| **a != AttackSpec::Identity).cloned());
        grid
    }

    pub fn needs_diffusion(&self) -> bool {
        self.attacks.grid.iter().any(|a| a.strength().is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c = RunConfig::from_toml_str(
            r#"
            seed = 9
            [corpus]
            synthetic_count = 300
            test_count = 20
            [codec]
            enabled = ["ss"]
            [diffusion]
            training_steps = 10
            [[attacks.grid]]
            kind = "jpeg_like"
            quality = 75
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.corpus.image_size, 32);
        assert_eq!(c.diffusion.width, DdpmConfig::default().width);
        assert_eq!(c.attack_grid(), vec![AttackSpec::Identity, AttackSpec::JpegLike { quality: 75 }]);
        assert!(!c.needs_diffusion());
    }

    #[test]
    fn unknown_keys_and_duplicates_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 3").is_err());
        let mut c = RunConfig::default();
        c.attacks.grid.push(AttackSpec::Crop { area_fraction: 0.1 });
        assert!(c.resolved().is_err());
        let mut c = RunConfig::default();
        c.codec.enabled = vec![];
        assert!(c.resolved().is_err());
    }

    #[test]
    fn shared_settings_propagate() {
        let mut c = RunConfig::default();
        c.payload_length = 8;
        c.corpus.image_size = 16;
        let r = c.resolved().unwrap();
        assert_eq!(r.codec.ss.payload_length, 8);
        assert_eq!(r.codec.learned.payload_length, 8);
        assert_eq!((r.codec.learned.image_size, r.diffusion.image_size), (16, 16));
    }
}
