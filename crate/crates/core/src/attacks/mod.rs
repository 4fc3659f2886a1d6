//! Image → image attacks: the conventional distortion suite plus diffusion
//! regeneration and decoder-guided removal.
//!
//! Every attack is a pure function of (input, parameters, seed).

pub mod classic;
pub mod spectrum;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, LatentCodec};
use crate::error::{LabError, Result};
use crate::image::ImageGrid;
use crate::rng::derive_seed;
use crate::watermark::{Payload, WatermarkDecoder};

/// One attack with its parameters. Stochastic kinds carry a base seed that
/// is combined with a per-image stream index at application time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    Identity,
    JpegLike {
        quality: u32,
    },
    GaussianNoise {
        sigma_255: f64,
        #[serde(default)]
        seed: u64,
    },
    Crop {
        area_fraction: f64,
    },
    Affine {
        angle_deg: f64,
        scale: f64,
    },
    Blur {
        sigma: f64,
    },
    Sharpen {
        amount: f64,
    },
    Regeneration {
        strength: f64,
        #[serde(default)]
        seed: u64,
    },
    GuidedRemoval {
        strength: f64,
        #[serde(default = "default_lambda")]
        lambda_weight: f64,
        #[serde(default = "default_gradient_steps")]
        gradient_steps: usize,
        /// Hex target message; all zeros when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_hex: Option<String>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_lambda() -> f64 {
    0.5
}

fn default_gradient_steps() -> usize {
    1
}

/// Read-only resources the diffusion attacks need.
#[derive(Clone, Copy, Default)]
pub struct AttackContext<'a> {
    pub model: Option<&'a DiffusionModel>,
    /// Decoder the guided attack steers against.
    pub decoder: Option<&'a dyn WatermarkDecoder>,
}

impl AttackSpec {
    /// Short kind name used in reports and filenames.
    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::Identity => "identity",
            AttackSpec::JpegLike { .. } => "jpeg_like",
            AttackSpec::GaussianNoise { .. } => "gaussian_noise",
            AttackSpec::Crop { .. } => "crop",
            AttackSpec::Affine { .. } => "affine",
            AttackSpec::Blur { .. } => "blur",
            AttackSpec::Sharpen { .. } => "sharpen",
            AttackSpec::Regeneration { .. } => "regeneration",
            AttackSpec::GuidedRemoval { .. } => "guided_removal",
        }
    }

    /// Checks that every parameter is in range for its kind.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidParam(m));
        match *self {
            AttackSpec::Identity => Ok(()),
            AttackSpec::JpegLike { quality } => classic::quant_table(quality).map(|_| ()),
            AttackSpec::GaussianNoise { sigma_255, .. } if !(sigma_255 >= 0.0 && sigma_255.is_finite()) => {
                bad(format!("noise sigma {sigma_255} must be non-negative"))
            }
            AttackSpec::Crop { area_fraction } if !(0.0..0.5).contains(&area_fraction) => {
                bad(format!("crop fraction {area_fraction} outside [0, 0.5)"))
            }
            AttackSpec::Affine { angle_deg, scale } if !(angle_deg.abs() <= 5.0 && (0.9..=1.1).contains(&scale)) => {
                bad(format!("affine angle {angle_deg} or scale {scale} out of range"))
            }
            AttackSpec::Blur { sigma } if !(sigma > 0.0 && sigma <= 3.0) => bad(format!("blur sigma {sigma} outside (0, 3]")),
            AttackSpec::Sharpen { amount } if !(amount > 0.0 && amount <= 1.0) => {
                bad(format!("sharpen amount {amount} outside (0, 1]"))
            }
            AttackSpec::Regeneration { strength, .. } if !(0.0..=1.0).contains(&strength) => {
                bad(format!("strength {strength} outside [0, 1]"))
            }
            AttackSpec::GuidedRemoval { strength, lambda_weight, gradient_steps, ref target_hex, .. } => {
                GuidedAttackConfig {
                    lambda_weight,
                    gradient_steps,
                    strength,
                    target: target_hex.as_ref().map(|h| parse_target(h, h.len() * 4)).transpose()?,
                }
                .validate()
            }
            _ => Ok(()),
        }
    }

    /// Diffusion strength `t/T` for the diffusion attacks.
    pub fn strength(&self) -> Option<f64> {
        match *self {
            AttackSpec::Regeneration { strength, .. } | AttackSpec::GuidedRemoval { strength, .. } => Some(strength),
            _ => None,
        }
    }

    /// Parameters without the kind tag, as an ordered map.
    pub fn params(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.into_iter().filter(|(k, _)| k != "kind").collect(),
            _ => BTreeMap::new(),
        }
    }

    /// Canonical JSON of [`Self::params`] (keys sorted).
    pub fn params_json(&self) -> String {
        serde_json::to_string(&self.params()).unwrap_or_default()
    }

    /// Deterministic attacked-image filename: `input__kind__params.png`.
    pub fn file_name(&self, input_name: &str) -> String {
        let params: Vec<String> = self
            .params()
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                format!("{k}-{}", v.replace('.', "p").replace('-', "m"))
            })
            .collect();
        let params = if params.is_empty() { "none".to_string() } else { params.join("_") };
        format!("{input_name}__{}__{params}.png", self.kind())
    }

    /// Applies the attack. `stream` selects an independent noise stream per
    /// image, derived from the attack's own seed.
    pub fn apply(&self, image: &ImageGrid, ctx: AttackContext<'_>, stream: u64) -> Result<ImageGrid> {
        self.validate()?;
        let stream_seed = |base: u64| derive_seed(base, self.kind(), stream);
        let model = || ctx.model.ok_or_else(|| LabError::ModelUnavailable(format!("{} needs a diffusion model", self.kind())));
        match self {
            AttackSpec::Identity => Ok(image.clone()),
            AttackSpec::JpegLike { quality } => classic::jpeg_like(image, *quality),
            AttackSpec::GaussianNoise { sigma_255, seed } => classic::gaussian_noise(image, *sigma_255, stream_seed(*seed)),
            AttackSpec::Crop { area_fraction } => classic::crop_border(image, *area_fraction),
            AttackSpec::Affine { angle_deg, scale } => classic::affine(image, *angle_deg, *scale),
            AttackSpec::Blur { sigma } => classic::blur(image, *sigma),
            AttackSpec::Sharpen { amount } => classic::sharpen(image, *amount),
            AttackSpec::Regeneration { strength, seed } => regenerate(model()?, image, *strength, stream_seed(*seed)),
            AttackSpec::GuidedRemoval { strength, lambda_weight, gradient_steps, target_hex, seed } => {
                let decoder = ctx
                    .decoder
                    .ok_or_else(|| LabError::ModelUnavailable("guided removal needs a watermark decoder".into()))?;
                let target = target_hex
                    .as_ref()
                    .map(|h| parse_target(h, decoder.payload_length()))
                    .transpose()?;
                let config = GuidedAttackConfig {
                    lambda_weight: *lambda_weight,
                    gradient_steps: *gradient_steps,
                    strength: *strength,
                    target,
                };
                // same derivation label as regeneration so equal seeds share noise
                let s = derive_seed(*seed, "regeneration", stream);
                guided_remove(model()?, image, &config, decoder, s)
            }
        }
    }
}

fn parse_target(hex: &str, len: usize) -> Result<Payload> {
    Payload::from_hex(hex, len).ok_or_else(|| LabError::InvalidParam(format!("target {hex:?} is not {len} hex-coded bits")))
}

fn require_trained(model: &DiffusionModel) -> Result<()> {
    if !model.is_trained() {
        return Err(LabError::ModelUnavailable("diffusion model has not been trained".into()));
    }
    Ok(())
}

/// Noise to `round(strength·T)` and denoise back deterministically; strength
/// 0 returns the input unchanged.
pub fn regenerate(model: &DiffusionModel, image: &ImageGrid, strength: f64, seed: u64) -> Result<ImageGrid> {
    require_trained(model)?;
    if strength == 0.0 {
        return Ok(image.clone());
    }
    LatentCodec.decode(&model.regenerate_latent(image, strength, seed)?)
}

/// Guided removal settings; the decoder is passed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedAttackConfig {
    pub lambda_weight: f64,
    pub gradient_steps: usize,
    pub strength: f64,
    /// Defaults to the all-zeros message of the decoder's length.
    pub target: Option<Payload>,
}

impl Default for GuidedAttackConfig {
    fn default() -> Self {
        Self { lambda_weight: default_lambda(), gradient_steps: default_gradient_steps(), strength: 0.3, target: None }
    }
}

impl GuidedAttackConfig {
    /// `λ = 0` is accepted as the degenerate case equal to regeneration.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(LabError::InvalidParam(format!("guidance weight {} must be ≥ 0", self.lambda_weight)));
        }
        if self.gradient_steps == 0 {
            return Err(LabError::InvalidParam("guided removal needs at least one gradient step".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(LabError::InvalidParam(format!("guided strength {} outside (0, 1]", self.strength)));
        }
        Ok(())
    }
}

/// Regeneration followed by gradient steps on the final latent that pull the
/// decoder output toward the target message, then a clamp to `[−1, 1]`.
pub fn guided_remove(
    model: &DiffusionModel,
    image: &ImageGrid,
    config: &GuidedAttackConfig,
    decoder: &dyn WatermarkDecoder,
    seed: u64,
) -> Result<ImageGrid> {
    config.validate()?;
    require_trained(model)?;
    let n = model.config().image_size;
    if decoder.image_size() != (n, n) {
        return Err(LabError::ShapeMismatch(format!(
            "decoder {} expects {:?}, diffusion model {n}x{n}",
            decoder.name(),
            decoder.image_size()
        )));
    }
    let target = match &config.target {
        Some(t) if t.len() != decoder.payload_length() => {
            return Err(LabError::PayloadLength { expected: decoder.payload_length(), got: t.len() })
        }
        Some(t) => t.clone(),
        None => Payload::zeros(decoder.payload_length()),
    };
    let mut latent = model.regenerate_latent(image, config.strength, seed)?;
    for _ in 0..config.gradient_steps {
        let current = LatentCodec.decode(&latent)?;
        let g = decoder.guidance_gradient(&current, &target)?;
        latent.data.iter_mut().zip(&g.data).for_each(|(y, d)| *y -= config.lambda_weight * d);
        latent.clamp();
    }
    LatentCodec.decode(&latent)
}
