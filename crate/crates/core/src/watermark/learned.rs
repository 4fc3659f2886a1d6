//! Learned encoder/decoder watermark trained through differentiable
//! distortions.
//!
//! Encoder: payload symbols → dense map to a 4-channel quarter-resolution
//! field → linear upsampling → concatenated with the centred image → four
//! 3×3 convolutions → `residual_max · tanh`. Decoder: four 3×3 convolutions
//! with two 2× average pools, a convolution to `L` channels, then a dense
//! layer from the flattened map to `L` logits.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Payload, WatermarkDecoder};
use crate::attacks::classic::{blockwise_dct, blur_matrix, crop_width, quant_table};
use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{LabError, Result};
use crate::image::{ImageGrid, PixelField};
use crate::nn::{self, sigmoid, silu, silu_backward, Adam, Conv2d, Hw, Linear, ParamLayout, Real, Resample};
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    GaussianNoise,
    JpegSoft,
    CropMask,
    Blur,
}

/// Distortion strengths used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSeverity {
    /// Noise std is `U(0, 1) · noise_sigma_255 / 255` per sample.
    pub noise_sigma_255: f64,
    pub jpeg_quality: u32,
    pub crop_fraction: f64,
    pub blur_sigma: f64,
}

impl Default for AugmentationSeverity {
    fn default() -> Self {
        Self { noise_sigma_255: 20.0, jpeg_quality: 50, crop_fraction: 0.1, blur_sigma: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnedCodecConfig {
    pub payload_length: usize,
    pub residual_max: f64,
    pub image_loss_weight: f64,
    pub training_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The image loss is off until this fraction of training, then ramps
    /// linearly to full weight at `image_loss_full_at`.
    pub image_loss_start: f64,
    pub image_loss_full_at: f64,
    pub channels: usize,
    pub augmentations: Vec<Augmentation>,
    pub severity: AugmentationSeverity,
    pub image_size: usize,
}

impl Default for LearnedCodecConfig {
    fn default() -> Self {
        Self {
            payload_length: 16,
            residual_max: 0.04,
            image_loss_weight: 50.0,
            training_steps: 4000,
            batch_size: 32,
            learning_rate: 3e-3,
            image_loss_start: 0.4,
            image_loss_full_at: 0.8,
            channels: 16,
            augmentations: vec![
                Augmentation::Identity,
                Augmentation::GaussianNoise,
                Augmentation::JpegSoft,
                Augmentation::CropMask,
                Augmentation::Blur,
            ],
            severity: AugmentationSeverity::default(),
            image_size: 32,
        }
    }
}

impl LearnedCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_max > 0.0 && self.residual_max <= 0.1) {
            return Err(LabError::InvalidParam(format!("residual_max {} outside (0, 0.1]", self.residual_max)));
        }
        if self.payload_length == 0 || self.payload_length > 32 {
            return Err(LabError::InvalidParam(format!("payload length {} outside 1..=32", self.payload_length)));
        }
        if self.image_size % 8 != 0 || self.image_size < 8 {
            return Err(LabError::InvalidParam(format!("image size {} must be a positive multiple of 8", self.image_size)));
        }
        if self.augmentations.is_empty() || self.batch_size == 0 || self.channels == 0 {
            return Err(LabError::InvalidParam("augmentations, batch size and channels must be non-empty".into()));
        }
        Ok(())
    }

    fn image_weight_at(&self, step: usize) -> f64 {
        let f = step as f64 / self.training_steps.max(1) as f64;
        let span = (self.image_loss_full_at - self.image_loss_start).max(1e-12);
        self.image_loss_weight * ((f - self.image_loss_start) / span).clamp(0.0, 1.0)
    }
}

/// Network topology; parameters live in one flat buffer described by `layout`.
#[derive(Debug, Clone)]
struct Nets {
    size: Hw,
    quarter: Hw,
    payload_length: usize,
    residual_max: f64,
    layout: ParamLayout,
    msg: Linear,
    enc: [Conv2d; 4],
    dec: [Conv2d; 5],
    head: Linear,
}

const MSG_CHANNELS: usize = 4;

impl Nets {
    fn new(cfg: &LearnedCodecConfig) -> Self {
        let size = Hw { h: cfg.image_size, w: cfg.image_size };
        let quarter = size.half().half();
        let (c, l) = (cfg.channels, cfg.payload_length);
        let mut layout = ParamLayout::default();
        let msg = Linear::new(&mut layout, "enc.msg", l, MSG_CHANNELS * quarter.area());
        let enc = [
            Conv2d::new(&mut layout, "enc.c1", 1 + MSG_CHANNELS, c, 3),
            Conv2d::new(&mut layout, "enc.c2", c, c, 3),
            Conv2d::new(&mut layout, "enc.c3", c, c, 3),
            Conv2d::new(&mut layout, "enc.c4", c, 1, 3),
        ];
        let dec = [
            Conv2d::new(&mut layout, "dec.c1", 1, c, 3),
            Conv2d::new(&mut layout, "dec.c2", c, c, 3),
            Conv2d::new(&mut layout, "dec.c3", c, 2 * c, 3),
            Conv2d::new(&mut layout, "dec.c4", 2 * c, 2 * c, 3),
            Conv2d::new(&mut layout, "dec.c5", 2 * c, l, 3),
        ];
        let head = Linear::new(&mut layout, "dec.head", l * quarter.area(), l);
        Self { size, quarter, payload_length: l, residual_max: cfg.residual_max, layout, msg, enc, dec, head }
    }
}

struct EncoderTape<R> {
    symbols: Vec<R>,
    input: Vec<R>,
    pre: [Vec<R>; 3],
    act: [Vec<R>; 3],
    tanh: Vec<R>,
}

struct DecoderTape<R> {
    input: Vec<R>,
    pre: [Vec<R>; 4],
    pooled: [Vec<R>; 2],
    act0: Vec<R>,
    act2: Vec<R>,
    map: Vec<R>,
}

impl Nets {
    fn encode<R: Real>(&self, p: &[R], resample: &Resample<R>, image: &[R], symbols: &[R]) -> (Vec<R>, EncoderTape<R>) {
        let s = self.size;
        let field = self.msg.forward(p, symbols);
        let up = resample.forward(&field, MSG_CHANNELS);
        let half = R::lit(0.5);
        let mut input: Vec<R> = image.iter().map(|v| *v - half).collect();
        input.extend_from_slice(&up);
        let pre0 = self.enc[0].forward(p, &input, s);
        let act0 = silu(&pre0);
        let pre1 = self.enc[1].forward(p, &act0, s);
        let act1 = silu(&pre1);
        let pre2 = self.enc[2].forward(p, &act1, s);
        let act2 = silu(&pre2);
        let out = self.enc[3].forward(p, &act2, s);
        let tanh: Vec<R> = out.iter().map(|v| v.tanh()).collect();
        let rmax = R::lit(self.residual_max);
        let residual = tanh.iter().map(|t| rmax * *t).collect();
        (residual, EncoderTape { symbols: symbols.to_vec(), input, pre: [pre0, pre1, pre2], act: [act0, act1, act2], tanh })
    }

    /// Accumulates encoder parameter gradients for `∂L/∂residual`.
    fn encode_backward<R: Real>(&self, p: &[R], resample: &Resample<R>, tape: &EncoderTape<R>, dres: &[R], grads: &mut [R]) {
        let s = self.size;
        let rmax = R::lit(self.residual_max);
        let dout: Vec<R> = dres.iter().zip(&tape.tanh).map(|(d, t)| *d * rmax * (R::one() - *t * *t)).collect();
        let da2 = self.enc[3].backward(p, &tape.act[2], s, &dout, grads, true).expect("dx");
        let dp2 = silu_backward(&tape.pre[2], &da2);
        let da1 = self.enc[2].backward(p, &tape.act[1], s, &dp2, grads, true).expect("dx");
        let dp1 = silu_backward(&tape.pre[1], &da1);
        let da0 = self.enc[1].backward(p, &tape.act[0], s, &dp1, grads, true).expect("dx");
        let dp0 = silu_backward(&tape.pre[0], &da0);
        let din = self.enc[0].backward(p, &tape.input, s, &dp0, grads, true).expect("dx");
        let dup = &din[s.area()..];
        let dfield = resample.backward(dup, MSG_CHANNELS);
        self.msg.backward(p, &tape.symbols, &dfield, grads);
    }

    fn decode<R: Real>(&self, p: &[R], image: &[R]) -> (Vec<R>, DecoderTape<R>) {
        let (s, h, q) = (self.size, self.size.half(), self.quarter);
        let c = self.dec[0].cout;
        let half = R::lit(0.5);
        let input: Vec<R> = image.iter().map(|v| *v - half).collect();
        let pre0 = self.dec[0].forward(p, &input, s);
        let act0 = silu(&pre0);
        let pre1 = self.dec[1].forward(p, &act0, s);
        let act1 = silu(&pre1);
        let pool0 = nn::avgpool2(&act1, c, s);
        let pre2 = self.dec[2].forward(p, &pool0, h);
        let act2 = silu(&pre2);
        let pre3 = self.dec[3].forward(p, &act2, h);
        let act3 = silu(&pre3);
        let pool1 = nn::avgpool2(&act3, 2 * c, h);
        let map = self.dec[4].forward(p, &pool1, q);
        let logits = self.head.forward(p, &map);
        (logits, DecoderTape { input, pre: [pre0, pre1, pre2, pre3], pooled: [pool0, pool1], act0, act2, map })
    }

    /// Accumulates decoder parameter gradients; returns `∂L/∂image`.
    fn decode_backward<R: Real>(&self, p: &[R], tape: &DecoderTape<R>, dlogits: &[R], grads: &mut [R]) -> Vec<R> {
        let (s, h, q) = (self.size, self.size.half(), self.quarter);
        let c = self.dec[0].cout;
        let dmap = self.head.backward(p, &tape.map, dlogits, grads);
        let dpool1 = self.dec[4].backward(p, &tape.pooled[1], q, &dmap, grads, true).expect("dx");
        let dact3 = nn::avgpool2_backward(&dpool1, 2 * c, h);
        let dpre3 = silu_backward(&tape.pre[3], &dact3);
        let dact2 = self.dec[3].backward(p, &tape.act2, h, &dpre3, grads, true).expect("dx");
        let dpre2 = silu_backward(&tape.pre[2], &dact2);
        let dpool0 = self.dec[2].backward(p, &tape.pooled[0], h, &dpre2, grads, true).expect("dx");
        let dact1 = nn::avgpool2_backward(&dpool0, c, s);
        let dpre1 = silu_backward(&tape.pre[1], &dact1);
        let dact0 = self.dec[1].backward(p, &tape.act0, s, &dpre1, grads, true).expect("dx");
        let dpre0 = silu_backward(&tape.pre[0], &dact0);
        self.dec[0].backward(p, &tape.input, s, &dpre0, grads, true).expect("dx")
    }
}

/// Soft-rounded JPEG surrogate on one `n × n` plane and its adjoint. Rounding
/// is replaced by `r − sin(2πr)/(2π)`.
struct SoftJpeg {
    q: [f64; 64],
}

impl SoftJpeg {
    fn new(quality: u32) -> Result<Self> {
        Ok(Self { q: quant_table(quality)? })
    }

    fn soft(r: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        (r - (tau * r).sin() / tau, 1.0 - (tau * r).cos())
    }

    /// Returns the distorted plane and the per-coefficient slopes needed by
    /// [`Self::backward`].
    fn forward(&self, plane: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut slopes = Vec::with_capacity(n * n);
        let out = blockwise_dct(plane, n, n, |c| {
            for (v, s) in c.iter_mut().zip(self.q) {
                let (y, dy) = Self::soft(*v / s);
                *v = y * s;
                slopes.push(dy);
            }
        });
        (out, slopes)
    }

    /// Adjoint: `∂L/∂x` from `∂L/∂y`. The transform is linear per block up to
    /// the diagonal slope, so the adjoint is DCT → scale by slope → IDCT.
    fn backward(&self, dy: &[f64], slopes: &[f64], n: usize) -> Vec<f64> {
        // Each block map is Dᵀ·diag(slope)·D, which is symmetric. Shifting by
        // the level offset undoes the 0–255 affine wrapper of blockwise_dct.
        // Exact only when n is a multiple of 8 (no reflect padding).
        let offset = 128.0 / 255.0;
        let mut k = 0;
        let shifted: Vec<f64> = dy.iter().map(|v| v + offset).collect();
        let out = blockwise_dct(&shifted, n, n, |c| {
            for v in c.iter_mut() {
                *v *= slopes[k];
                k += 1;
            }
        });
        out.iter().map(|v| v - offset).collect()
    }
}

/// Differentiable training distortions on `n × n` planes.
struct Augmenter {
    n: usize,
    severity: AugmentationSeverity,
    jpeg: SoftJpeg,
    blur: Vec<f64>,
    crop_border: usize,
}

enum AugTape {
    Linear,
    Jpeg(Vec<f64>),
    Mask,
    Blur,
}

impl Augmenter {
    fn new(n: usize, severity: AugmentationSeverity) -> Result<Self> {
        Ok(Self {
            n,
            severity,
            jpeg: SoftJpeg::new(severity.jpeg_quality)?,
            blur: blur_matrix(n, severity.blur_sigma),
            crop_border: crop_width(n, n, severity.crop_fraction)?,
        })
    }

    fn blur_apply(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let n = self.n;
        let m = |i: usize, j: usize| if transpose { self.blur[j * n + i] } else { self.blur[i * n + j] };
        let mut tmp = vec![0.0; n * n];
        for y in 0..n {
            for xx in 0..n {
                tmp[y * n + xx] = (0..n).map(|j| m(xx, j) * x[y * n + j]).sum();
            }
        }
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for xx in 0..n {
                out[y * n + xx] = (0..n).map(|i| m(y, i) * tmp[i * n + xx]).sum();
            }
        }
        out
    }

    fn in_border(&self, i: usize) -> bool {
        let (y, x, n, b) = (i / self.n, i % self.n, self.n, self.crop_border);
        y < b || y >= n - b || x < b || x >= n - b
    }

    fn forward(&self, kind: Augmentation, x: &[f64], rng: &mut impl Rng) -> (Vec<f64>, AugTape) {
        match kind {
            Augmentation::Identity => (x.to_vec(), AugTape::Linear),
            Augmentation::GaussianNoise => {
                let sigma = rng.gen::<f64>() * self.severity.noise_sigma_255 / 255.0;
                let out = x.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                (out, AugTape::Linear)
            }
            Augmentation::JpegSoft => {
                let (out, slopes) = self.jpeg.forward(x, self.n);
                (out, AugTape::Jpeg(slopes))
            }
            Augmentation::CropMask => {
                let out = x.iter().enumerate().map(|(i, v)| if self.in_border(i) { 0.5 } else { *v }).collect();
                (out, AugTape::Mask)
            }
            Augmentation::Blur => (self.blur_apply(x, false), AugTape::Blur),
        }
    }

    fn backward(&self, tape: &AugTape, dy: &[f64]) -> Vec<f64> {
        match tape {
            AugTape::Linear => dy.to_vec(),
            AugTape::Jpeg(slopes) => self.jpeg.backward(dy, slopes, self.n),
            AugTape::Mask => dy.iter().enumerate().map(|(i, d)| if self.in_border(i) { 0.0 } else { *d }).collect(),
            AugTape::Blur => self.blur_apply(dy, true),
        }
    }
}

/// Training summary measured on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub final_loss: f64,
    pub heldout_identity_accuracy: f64,
}

/// Trained learned codec. Parameters are stored in `f64`.
#[derive(Debug, Clone)]
pub struct LearnedCodec {
    config: LearnedCodecConfig,
    training_seed: u64,
    nets: Nets,
    params: Vec<f64>,
    resample: Resample<f64>,
}

/// Minimum held-out identity accuracy for a usable codec.
pub const MIN_IDENTITY_ACCURACY: f64 = 0.95;

impl LearnedCodec {
    /// Freshly initialised, untrained codec.
    pub fn initialise(config: LearnedCodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let nets = Nets::new(&config);
        let params = nets.layout.init(&mut derived_rng(seed, "codec-init", 0));
        let resample = Resample::new(nets.quarter, nets.size);
        Ok(Self { config, training_seed: seed, nets, params, resample })
    }

    pub fn from_parts(config: LearnedCodecConfig, seed: u64, params: Vec<f64>) -> Result<Self> {
        let mut codec = Self::initialise(config, seed)?;
        if params.len() != codec.params.len() {
            return Err(LabError::Checkpoint(format!(
                "codec expects {} parameters, got {}",
                codec.params.len(),
                params.len()
            )));
        }
        codec.params = params;
        Ok(codec)
    }

    pub fn config(&self) -> &LearnedCodecConfig {
        &self.config
    }

    pub fn training_seed(&self) -> u64 {
        self.training_seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.nets.layout
    }

    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        let n = self.config.image_size;
        if image.height() != n || image.width() != n {
            return Err(LabError::ShapeMismatch(format!(
                "codec expects {n}x{n}, image is {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Encoder residual for `image` (luminance), bounded by `residual_max`.
    pub fn residual(&self, image: &ImageGrid, payload: &Payload) -> Result<Vec<f64>> {
        self.check_image(image)?;
        if payload.len() != self.config.payload_length {
            return Err(LabError::PayloadLength { expected: self.config.payload_length, got: payload.len() });
        }
        let symbols: Vec<f64> = payload.symbols().collect();
        Ok(self.nets.encode(&self.params, &self.resample, &image.luminance(), &symbols).0)
    }

    pub fn embed(&self, image: &ImageGrid, payload: &Payload) -> Result<ImageGrid> {
        let r = self.residual(image, payload)?;
        Ok(image.add_luminance_clamped(&r))
    }

    pub fn logits(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        self.check_image(image)?;
        Ok(self.nets.decode(&self.params, &image.luminance()).0)
    }

    pub fn decode_with_logits(&self, image: &ImageGrid) -> Result<(Payload, Vec<f64>)> {
        let logits = self.logits(image)?;
        Ok((Payload::from_bits(logits.iter().map(|l| *l > 0.0).collect()), logits))
    }

    /// `∇_image Σ_i (σ(logit_i) − t_i)²` for real-valued targets `t`.
    pub fn gradient_towards(&self, image: &ImageGrid, targets: &[f64]) -> Result<PixelField> {
        self.check_image(image)?;
        if targets.len() != self.config.payload_length {
            return Err(LabError::PayloadLength { expected: self.config.payload_length, got: targets.len() });
        }
        let (logits, tape) = self.nets.decode(&self.params, &image.luminance());
        let dlogits: Vec<f64> = logits
            .iter()
            .zip(targets)
            .map(|(l, t)| {
                let s = sigmoid(*l);
                2.0 * (s - t) * s * (1.0 - s)
            })
            .collect();
        let mut scratch = vec![0.0; self.params.len()];
        let g = self.nets.decode_backward(&self.params, &tape, &dlogits, &mut scratch);
        Ok(PixelField::from_luminance_gradient(image.height(), image.width(), image.channels(), &g))
    }

    pub fn decoder_gradient(&self, image: &ImageGrid, target: &Payload) -> Result<PixelField> {
        let t: Vec<f64> = target.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        self.gradient_towards(image, &t)
    }

    /// Squared error between decoder sigmoids and target bits.
    pub fn decoder_loss(&self, image: &ImageGrid, targets: &[f64]) -> Result<f64> {
        Ok(self.logits(image)?.iter().zip(targets).map(|(l, t)| (sigmoid(*l) - t).powi(2)).sum())
    }
}

pub const CHECKPOINT_KIND: &str = "learned_codec";

impl LearnedCodec {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.training_seed, &self.nets.layout, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let codec = Self::from_parts(ck.config()?, ck.header.seed, ck.data.clone())?;
        ck.expect(CHECKPOINT_KIND, &codec.nets.layout)?;
        Ok(codec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl WatermarkDecoder for LearnedCodec {
    fn name(&self) -> &str {
        "learned"
    }

    fn payload_length(&self) -> usize {
        self.config.payload_length
    }

    fn image_size(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    fn decode(&self, image: &ImageGrid) -> Result<Payload> {
        Ok(self.decode_with_logits(image)?.0)
    }

    /// Gradient of the raw squared-sigmoid loss in `y = 2x − 1`.
    fn guidance_gradient(&self, image: &ImageGrid, target: &Payload) -> Result<PixelField> {
        let mut g = self.decoder_gradient(image, target)?;
        g.data.iter_mut().for_each(|v| *v *= 0.5);
        Ok(g)
    }
}

fn bce_with_logits(l: f64, t: f64) -> f64 {
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

/// One optimisation step over a batch in scalar type `R`. Returns the loss.
#[allow(clippy::too_many_arguments)]
fn train_step<R: Real>(
    nets: &Nets,
    resample: &Resample<R>,
    aug: &Augmenter,
    params: &[R],
    grads: &mut [R],
    batch: &[(&[f64], Vec<bool>)],
    kind: Augmentation,
    image_weight: f64,
    rng: &mut impl Rng,
) -> f64 {
    grads.iter_mut().for_each(|g| *g = R::zero());
    let b = batch.len() as f64;
    let l = nets.payload_length as f64;
    let pixels = nets.size.area() as f64;
    let mut loss = 0.0;
    for (image, bits) in batch {
        let x: Vec<R> = nn::from_f64(image);
        let symbols: Vec<R> = bits.iter().map(|b| if *b { R::one() } else { -R::one() }).collect();
        let (res, etape) = nets.encode(params, resample, &x, &symbols);
        let res64 = nn::to_f64(&res);
        let y: Vec<f64> = image.iter().zip(&res64).map(|(a, r)| a + r).collect();
        let (z, atape) = aug.forward(kind, &y, rng);
        let (logits, dtape) = nets.decode(params, &nn::from_f64::<R>(&z));
        let mut dlogits = Vec::with_capacity(logits.len());
        for (lg, bit) in logits.iter().zip(bits) {
            let (lv, t) = (lg.to_f64().unwrap_or(0.0), if *bit { 1.0 } else { 0.0 });
            loss += bce_with_logits(lv, t) / (b * l);
            dlogits.push(R::lit((sigmoid(lv) - t) / (b * l)));
        }
        loss += image_weight * res64.iter().map(|r| r * r).sum::<f64>() / (b * pixels);
        let dz = nn::to_f64(&nets.decode_backward(params, &dtape, &dlogits, grads));
        let dy = aug.backward(&atape, &dz);
        let dres: Vec<R> = dy
            .iter()
            .zip(&res64)
            .map(|(d, r)| R::lit(d + image_weight * 2.0 * r / (b * pixels)))
            .collect();
        nets.encode_backward(params, resample, &etape, &dres, grads);
    }
    loss
}

/// Trains encoder and decoder jointly on the corpus training split. Training
/// runs in `f32`; the returned codec holds the parameters as `f64`.
pub fn train_codec(corpus: &Corpus, config: &LearnedCodecConfig, seed: u64) -> Result<(LearnedCodec, CodecTrainReport)> {
    config.validate()?;
    let train: Vec<&ImageGrid> = corpus.train_images().collect();
    if train.is_empty() {
        return Err(LabError::InvalidSplit("learned codec needs a non-empty training split".into()));
    }
    let n = config.image_size;
    if let Some(bad) = train.iter().find(|i| i.height() != n || i.width() != n) {
        return Err(LabError::ShapeMismatch(format!("training image {}x{} vs codec {n}x{n}", bad.height(), bad.width())));
    }
    let lumas: Vec<Vec<f64>> = train.iter().map(|i| i.luminance()).collect();
    let mut codec = LearnedCodec::initialise(config.clone(), seed)?;
    let nets = codec.nets.clone();
    let resample = Resample::<f32>::new(nets.quarter, nets.size);
    let aug = Augmenter::new(n, config.severity)?;
    let mut params: Vec<f32> = nn::from_f64(&codec.params);
    let mut grads = vec![0f32; params.len()];
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut rng = derived_rng(seed, "codec-train", 0);
    let mut final_loss = f64::NAN;
    for step in 0..config.training_steps {
        let batch: Vec<(&[f64], Vec<bool>)> = (0..config.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..lumas.len());
                (lumas[i].as_slice(), (0..config.payload_length).map(|_| rng.gen::<bool>()).collect())
            })
            .collect();
        let kind = config.augmentations[step % config.augmentations.len()];
        let w = config.image_weight_at(step);
        final_loss = train_step(&nets, &resample, &aug, &params, &mut grads, &batch, kind, w, &mut rng);
        opt.step(&mut params, &grads);
        if step % 250 == 0 {
            log::info!("codec step {step}: loss {final_loss:.4} (image weight {w:.1})");
        }
    }
    codec.params = nn::to_f64(&params);
    let accuracy = heldout_identity_accuracy(&codec, corpus, seed);
    let report = CodecTrainReport { final_loss, heldout_identity_accuracy: accuracy };
    if accuracy < MIN_IDENTITY_ACCURACY {
        return Err(LabError::CodecUnderTrained { accuracy, required: MIN_IDENTITY_ACCURACY });
    }
    Ok((codec, report))
}

/// Mean bit accuracy of embed → decode on the test split (the training split
/// when no test split exists), one random payload per image.
pub fn heldout_identity_accuracy(codec: &LearnedCodec, corpus: &Corpus, seed: u64) -> f64 {
    let idx: &[usize] = if corpus.split.test.is_empty() { &corpus.split.train } else { &corpus.split.test };
    let l = codec.config.payload_length;
    let accs = crate::par::map_indices(idx.len(), |k| {
        let img = &corpus.images[idx[k]];
        let p = Payload::random(l, &mut derived_rng(seed, "codec-heldout", k as u64));
        let d = codec.embed(img, &p).and_then(|wm| codec.decode(&wm));
        d.map(|d| d.bits().iter().zip(p.bits()).filter(|(a, b)| a == b).count() as f64 / l as f64)
            .unwrap_or(0.0)
    });
    accs.iter().sum::<f64>() / accs.len().max(1) as f64
}
