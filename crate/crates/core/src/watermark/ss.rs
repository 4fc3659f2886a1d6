//! Spread-spectrum watermark on the global 2-D DCT of the luminance plane.
//!
//! Each payload bit owns a disjoint set of `chips_per_bit` mid-band
//! coefficients (`band_lo ≤ u + v ≤ band_hi`) and a key-derived ±1 pattern on
//! them. Embedding adds `α · b_i · p_i`; decoding correlates against `p_i`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Payload, WatermarkDecoder, WatermarkKey};
use crate::dct::Dct2;
use crate::error::{LabError, Result};
use crate::image::{ImageGrid, PixelField, LUMA_WEIGHTS};
use crate::metrics::psnr;
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsConfig {
    /// Per-chip amplitude in orthonormal DCT units of `[0, 1]` images.
    pub strength_alpha: f64,
    pub band_lo: usize,
    pub band_hi: usize,
    pub chips_per_bit: usize,
    pub payload_length: usize,
}

impl Default for SsConfig {
    fn default() -> Self {
        let (payload_length, chips_per_bit) = (16, 24);
        Self {
            // energy α²·L·n spread over 32×32 pixels gives MSE 1e-4 (40 dB) before clamping
            strength_alpha: (1e-4 * 1024.0 / (payload_length * chips_per_bit) as f64).sqrt(),
            band_lo: 10,
            band_hi: 30,
            chips_per_bit,
            payload_length,
        }
    }
}

/// Band coefficients `(u, v)` of an `h × w` DCT, as flat indices `u * w + v`.
pub fn band_indices(h: usize, w: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..h)
        .flat_map(|u| (0..w).map(move |v| (u, v)))
        .filter(|(u, v)| (lo..=hi).contains(&(u + v)))
        .map(|(u, v)| u * w + v)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SsCodec {
    key: WatermarkKey,
    config: SsConfig,
    height: usize,
    width: usize,
    dct: Dct2,
    /// Chip coefficient indices per bit.
    chips: Vec<Vec<usize>>,
    /// ±1 pattern per bit, aligned with `chips`.
    signs: Vec<Vec<f64>>,
    /// Spatial image of each bit's unit pattern, `IDCT(p_i)`.
    spatial: Vec<Vec<f64>>,
}

impl SsCodec {
    pub fn new(key: WatermarkKey, config: SsConfig, height: usize, width: usize) -> Result<Self> {
        if config.payload_length == 0 || config.chips_per_bit == 0 {
            return Err(LabError::InvalidParam("payload length and chips per bit must be positive".into()));
        }
        if !(config.strength_alpha >= 0.0) {
            return Err(LabError::InvalidParam(format!("strength {} must be non-negative", config.strength_alpha)));
        }
        let mut band = band_indices(height, width, config.band_lo, config.band_hi);
        let needed = config.payload_length * config.chips_per_bit;
        if needed > band.len() {
            return Err(LabError::Capacity { needed, available: band.len() });
        }
        let mut rng = derived_rng(key.0, "ss-chips", 0);
        band.shuffle(&mut rng);
        let chips: Vec<Vec<usize>> = band[..needed].chunks(config.chips_per_bit).map(<[usize]>::to_vec).collect();
        let signs: Vec<Vec<f64>> = chips
            .iter()
            .map(|c| c.iter().map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        let dct = Dct2::new(height, width);
        let spatial = chips
            .iter()
            .zip(&signs)
            .map(|(c, s)| {
                let mut coeffs = vec![0.0; height * width];
                c.iter().zip(s).for_each(|(&k, &p)| coeffs[k] = p);
                dct.inverse(&coeffs)
            })
            .collect();
        Ok(Self { key, config, height, width, dct, chips, signs, spatial })
    }

    pub fn config(&self) -> &SsConfig {
        &self.config
    }

    pub fn key(&self) -> WatermarkKey {
        self.key
    }

    pub fn chips(&self) -> &[Vec<usize>] {
        &self.chips
    }

    pub fn chip_signs(&self) -> &[Vec<f64>] {
        &self.signs
    }

    /// Unit-amplitude spatial pattern of bit `i` (luminance plane).
    pub fn spatial_pattern(&self, i: usize) -> &[f64] {
        &self.spatial[i]
    }

    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(LabError::ShapeMismatch(format!(
                "codec built for {}x{}, image is {}x{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn check_payload(&self, payload: &Payload) -> Result<()> {
        if payload.len() != self.config.payload_length {
            return Err(LabError::PayloadLength { expected: self.config.payload_length, got: payload.len() });
        }
        Ok(())
    }

    /// Watermark coefficients `α · Σ b_i p_i` in the DCT domain.
    pub fn watermark_coefficients(&self, payload: &Payload) -> Result<Vec<f64>> {
        self.check_payload(payload)?;
        let mut coeffs = vec![0.0; self.height * self.width];
        for ((chips, signs), b) in self.chips.iter().zip(&self.signs).zip(payload.symbols()) {
            for (&k, &p) in chips.iter().zip(signs) {
                coeffs[k] += self.config.strength_alpha * b * p;
            }
        }
        Ok(coeffs)
    }

    /// Spatial luminance residual added by [`Self::embed`] before clamping.
    pub fn residual(&self, payload: &Payload) -> Result<Vec<f64>> {
        Ok(self.dct.inverse(&self.watermark_coefficients(payload)?))
    }

    pub fn embed(&self, image: &ImageGrid, payload: &Payload) -> Result<ImageGrid> {
        self.check_image(image)?;
        let residual = self.residual(payload)?;
        Ok(image.add_luminance_clamped(&residual))
    }

    /// Correlations `z_i = ⟨DCT(Y)|chips_i, p_i⟩`.
    pub fn correlations(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let coeffs = self.dct.forward(&image.luminance());
        Ok(self
            .chips
            .iter()
            .zip(&self.signs)
            .map(|(chips, signs)| chips.iter().zip(signs).map(|(&k, &p)| coeffs[k] * p).sum())
            .collect())
    }

    /// Decoded bits and confidences `|z_i| / (α · n)`.
    pub fn decode_with_confidence(&self, image: &ImageGrid) -> Result<(Payload, Vec<f64>)> {
        let z = self.correlations(image)?;
        let scale = self.config.strength_alpha * self.config.chips_per_bit as f64;
        let bits = z.iter().map(|v| *v > 0.0).collect();
        let conf = z.iter().map(|v| if scale > 0.0 { v.abs() / scale } else { f64::INFINITY }).collect();
        Ok((Payload::from_bits(bits), conf))
    }

    /// Correlation value an ideal embedding of `target` produces on a
    /// featureless image: `(2·bit − 1) · α · n`.
    pub fn target_correlations(&self, target: &Payload) -> Result<Vec<f64>> {
        self.check_payload(target)?;
        let scale = self.config.strength_alpha * self.config.chips_per_bit as f64;
        Ok(target.symbols().map(|b| b * scale).collect())
    }

    /// `∇_image Σ_i (z_i − z̃_i)²` for explicit targets `z̃`.
    pub fn gradient_towards(&self, image: &ImageGrid, targets: &[f64]) -> Result<PixelField> {
        if targets.len() != self.config.payload_length {
            return Err(LabError::PayloadLength { expected: self.config.payload_length, got: targets.len() });
        }
        let z = self.correlations(image)?;
        let mut g = vec![0.0; self.height * self.width];
        for ((zi, ti), pattern) in z.iter().zip(targets).zip(&self.spatial) {
            let r = 2.0 * (zi - ti);
            if r != 0.0 {
                g.iter_mut().zip(pattern).for_each(|(gv, pv)| *gv += r * pv);
            }
        }
        Ok(PixelField::from_luminance_gradient(self.height, self.width, image.channels(), &g))
    }

    /// `∇_image Σ_i (z_i − z̃_i)²` with `z̃` implied by `target`.
    pub fn decoder_gradient(&self, image: &ImageGrid, target: &Payload) -> Result<PixelField> {
        let t = self.target_correlations(target)?;
        self.gradient_towards(image, &t)
    }

    /// `‖∇_y z_i‖²` in the normalised space `y = 2x − 1`, identical for every bit.
    pub fn normalized_sensitivity(&self, channels: usize) -> f64 {
        let w2: f64 = if channels == 1 { 1.0 } else { LUMA_WEIGHTS.iter().map(|w| w * w).sum() };
        self.config.chips_per_bit as f64 * w2 / 4.0
    }

    /// Per-bit signal amplitude `‖α p_i‖` measured in normalised pixel units.
    pub fn bit_amplitude_normalized(&self) -> f64 {
        2.0 * self.config.strength_alpha * (self.config.chips_per_bit as f64).sqrt()
    }
}

impl WatermarkDecoder for SsCodec {
    fn name(&self) -> &str {
        "ss"
    }

    fn payload_length(&self) -> usize {
        self.config.payload_length
    }

    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn decode(&self, image: &ImageGrid) -> Result<Payload> {
        Ok(self.decode_with_confidence(image)?.0)
    }

    /// Gradient in `y = 2x − 1` of `Σ (z_i − z̃_i)² / ‖∇_y z_i‖²`. One step of
    /// size 1/2 along it moves every correlation exactly onto its target
    /// (before clamping); any step above 1/4 flips a fully embedded opposite bit.
    fn guidance_gradient(&self, image: &ImageGrid, target: &Payload) -> Result<PixelField> {
        let mut g = self.decoder_gradient(image, target)?;
        let scale = 0.5 / self.normalized_sensitivity(image.channels());
        g.data.iter_mut().for_each(|v| *v *= scale);
        Ok(g)
    }
}

/// Chooses `α` by bisection so that the mean PSNR of embedded images over
/// `images` (random payloads from `seed`) equals `target_db`.
pub fn calibrate_alpha(
    images: &[ImageGrid],
    base: SsConfig,
    key: WatermarkKey,
    target_db: f64,
    seed: u64,
) -> Result<SsConfig> {
    let first = images.first().ok_or_else(|| LabError::InvalidParam("calibration needs images".into()))?;
    let payloads: Vec<Payload> = (0..images.len())
        .map(|i| Payload::random(base.payload_length, &mut derived_rng(seed, "ss-calibration", i as u64)))
        .collect();
    let mean_psnr = |alpha: f64| -> Result<f64> {
        let codec = SsCodec::new(key, SsConfig { strength_alpha: alpha, ..base }, first.height(), first.width())?;
        let vals = crate::par::map_indices(images.len(), |i| {
            codec.embed(&images[i], &payloads[i]).and_then(|wm| psnr(&images[i], &wm))
        });
        let mut sum = 0.0;
        for v in vals {
            sum += v?;
        }
        Ok(sum / images.len() as f64)
    };
    let (mut lo, mut hi) = (1e-6_f64, 1.0_f64);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if mean_psnr(mid)? > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SsConfig { strength_alpha: (lo * hi).sqrt(), ..base })
}
