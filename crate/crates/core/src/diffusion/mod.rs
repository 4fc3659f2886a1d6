//! Pixel-space denoising diffusion: schedule, ε-prediction training and
//! deterministic re-spaced reverse sampling.
//!
//! Model space is `y = 2x − 1`. The latent codec is the identity on that
//! space, kept as an explicit step so attacks read encode → noise → denoise →
//! decode.

mod schedule;
mod unet;

pub use schedule::{DiffusionSchedule, DEFAULT_STEPS};
pub use unet::UNet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{LabError, Result};
use crate::image::ImageGrid;
use crate::metrics::psnr;
use crate::nn::{self, Adam, Ema, Hw, Real};
use crate::par;
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmConfig {
    pub width: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub schedule: ScheduleConfig,
    pub training_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate is constant until this fraction of training, then
    /// decays linearly to `lr_floor · learning_rate` at the last step.
    pub lr_decay_start: f64,
    pub lr_floor: f64,
    pub ema_decay: f64,
    /// Reverse steps used by regeneration regardless of the start timestep.
    pub sampling_steps: usize,
    /// Quality gate: mean PSNR of regeneration at `gate_strength` over up to
    /// `gate_images` held-out images must reach `gate_psnr_db`.
    pub gate_strength: f64,
    pub gate_psnr_db: f64,
    pub gate_images: usize,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            width: 32,
            image_size: 32,
            image_channels: 1,
            schedule: ScheduleConfig::default(),
            training_steps: 10000,
            batch_size: 32,
            learning_rate: 2e-3,
            lr_decay_start: 0.5,
            lr_floor: 0.1,
            ema_decay: 0.999,
            sampling_steps: 50,
            gate_strength: 0.3,
            gate_psnr_db: 24.0,
            gate_images: 50,
        }
    }
}

impl DdpmConfig {
    /// Learning rate at a zero-based training step.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let start = self.lr_decay_start * self.training_steps as f64;
        let span = (self.training_steps as f64 - start).max(1.0);
        let progress = ((step as f64 - start) / span).clamp(0.0, 1.0);
        self.learning_rate * (1.0 - progress * (1.0 - self.lr_floor))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.width % 2 != 0 {
            return Err(LabError::InvalidParam(format!("denoiser width {} must be even and ≥ 2", self.width)));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(LabError::InvalidParam(format!("image size {} must be even and ≥ 8", self.image_size)));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(LabError::InvalidParam(format!("{} image channels", self.image_channels)));
        }
        if !((0.0..=1.0).contains(&self.lr_decay_start) && self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(LabError::InvalidParam(format!(
                "learning-rate decay start {} or floor {} outside (0, 1]",
                self.lr_decay_start, self.lr_floor
            )));
        }
        if self.batch_size == 0 || self.sampling_steps == 0 || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(LabError::InvalidParam("batch size, sampling steps and EMA decay must be usable".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

/// Image in normalized model space, interleaved `H × W × C` like [`ImageGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    fn to_planar<R: Real>(&self) -> Vec<R> {
        let (n, c) = (self.height * self.width, self.channels);
        let mut out = vec![R::zero(); n * c];
        for (i, v) in self.data.iter().enumerate() {
            out[(i % c) * n + i / c] = R::lit(*v);
        }
        out
    }

    fn from_planar<R: Real>(like: &Latent, planar: &[R]) -> Latent {
        let (n, c) = (like.height * like.width, like.channels);
        let data = (0..n * c).map(|i| planar[(i % c) * n + i / c].to_f64().unwrap_or(f64::NAN)).collect();
        Latent { height: like.height, width: like.width, channels: like.channels, data }
    }

    /// Clamps into the valid model range `[−1, 1]`.
    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
}

/// Identity latent codec: images ↔ normalized model space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodec;

impl LatentCodec {
    pub fn encode(&self, image: &ImageGrid) -> Latent {
        Latent { height: image.height(), width: image.width(), channels: image.channels(), data: image.to_normalized() }
    }

    /// Inverse of [`Self::encode`]; out-of-range values are clamped.
    pub fn decode(&self, latent: &Latent) -> Result<ImageGrid> {
        ImageGrid::from_normalized(latent.height, latent.width, latent.channels, &latent.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmTrainReport {
    pub final_loss: f64,
    /// ε-prediction MSE on held-out images with fixed noise draws; the zero
    /// predictor scores 1.
    pub validation_loss: f64,
    pub gate_psnr_db: f64,
}

/// Trained (or freshly initialised) noise-prediction model.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    config: DdpmConfig,
    schedule: DiffusionSchedule,
    net: UNet,
    params: Vec<f64>,
    /// Inference runs in single precision; derived from `params`.
    params32: Vec<f32>,
    training_seed: u64,
    trained: bool,
    report: Option<DdpmTrainReport>,
    /// Normalization `y = (x − mean)/std`; fixed at 0.5/0.5.
    pub data_mean: f64,
    pub data_std: f64,
}

pub const CHECKPOINT_KIND: &str = "ddpm";

impl DiffusionModel {
    /// Untrained model with seeded initial weights.
    pub fn initialise(config: DdpmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let net = UNet::new(config.width, config.image_channels, Hw { h: config.image_size, w: config.image_size });
        let params: Vec<f64> = net.layout.init(&mut derived_rng(seed, "ddpm-init", 0));
        let params32 = nn::from_f64(&params);
        Ok(Self {
            config,
            schedule,
            net,
            params,
            params32,
            training_seed: seed,
            trained: false,
            report: None,
            data_mean: 0.5,
            data_std: 0.5,
        })
    }

    fn set_params(&mut self, params: Vec<f64>) {
        self.params32 = nn::from_f64(&params);
        self.params = params;
    }

    pub fn config(&self) -> &DdpmConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn training_seed(&self) -> u64 {
        self.training_seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn report(&self) -> Option<&DdpmTrainReport> {
        self.report.as_ref()
    }

    /// Changes the reverse step count; training is unaffected by it.
    pub fn set_sampling_steps(&mut self, steps: usize) -> Result<()> {
        if steps == 0 {
            return Err(LabError::InvalidParam("sampling steps must be ≥ 1".into()));
        }
        self.config.sampling_steps = steps;
        Ok(())
    }

    pub fn latent_codec(&self) -> LatentCodec {
        LatentCodec
    }

    fn check_shape(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let n = self.config.image_size;
        if h != n || w != n || c != self.config.image_channels {
            return Err(LabError::ShapeMismatch(format!(
                "diffusion model expects {n}x{n}x{}, got {h}x{w}x{c}",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·y + √(1−ᾱ_t)·ε` with `ε` drawn from `noise_seed`; `t = 0` returns
    /// the latent unchanged.
    pub fn add_noise(&self, image: &ImageGrid, t: usize, noise_seed: u64) -> Result<Latent> {
        self.check_shape(image.height(), image.width(), image.channels())?;
        let ab = self.schedule.alpha_bar(t)?;
        let mut latent = LatentCodec.encode(image);
        if t == 0 {
            return Ok(latent);
        }
        let mut rng = derived_rng(noise_seed, "diffusion-noise", 0);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        latent.data.iter_mut().for_each(|v| *v = a * *v + b * rng.sample::<f64, _>(StandardNormal));
        Ok(latent)
    }

    /// Predicted noise at timestep `t ∈ 1..=T`.
    pub fn predict_noise(&self, latent: &Latent, t: usize) -> Result<Vec<f64>> {
        self.check_shape(latent.height, latent.width, latent.channels)?;
        if t == 0 || t > self.schedule.len() {
            return Err(LabError::InvalidParam(format!("timestep {t} outside 1..={}", self.schedule.len())));
        }
        let (out, _) = self.net.forward(&self.params32, &latent.to_planar::<f32>(), t - 1);
        Ok(Latent::from_planar(latent, &out).data)
    }

    /// Deterministic reverse trajectory from `x_t` over `step_count` re-spaced
    /// steps, returning the final latent (already inside `[−1, 1]`).
    pub fn denoise_latent(&self, x_t: &Latent, t: usize, step_count: usize) -> Result<Latent> {
        self.check_shape(x_t.height, x_t.width, x_t.channels)?;
        if t > self.schedule.len() {
            return Err(LabError::InvalidParam(format!("timestep {t} outside 0..={}", self.schedule.len())));
        }
        if t == 0 {
            return Ok(x_t.clone());
        }
        if step_count == 0 || step_count > t {
            return Err(LabError::InvalidParam(format!("step count {step_count} must be in 1..={t}")));
        }
        let ts = self.schedule.respaced(t, step_count);
        let mut x: Vec<f32> = x_t.to_planar();
        for w in ts.windows(2) {
            let (tc, tn) = (w[0], w[1]);
            let ac = self.schedule.alpha_bar(tc)? as f32;
            let an = self.schedule.alpha_bar(tn)? as f32;
            let (eps, _) = self.net.forward(&self.params32, &x, tc - 1);
            let (sa, sb) = (ac.sqrt(), (1.0 - ac).sqrt());
            let (na, nb) = (an.sqrt(), (1.0 - an).sqrt());
            for (xv, e) in x.iter_mut().zip(&eps) {
                let x0 = ((*xv - sb * e) / sa).clamp(-1.0, 1.0);
                let e2 = (*xv - sa * x0) / sb;
                *xv = na * x0 + nb * e2;
            }
        }
        Ok(Latent::from_planar(x_t, &x))
    }

    /// Reverse sampling from `x_t` decoded to an image; `t = 0` decodes
    /// directly.
    pub fn denoise_from(&self, x_t: &Latent, t: usize, step_count: usize) -> Result<ImageGrid> {
        LatentCodec.decode(&self.denoise_latent(x_t, t, step_count)?)
    }

    /// Regeneration trajectory in latent space: noise to `round(s·T)` then
    /// denoise with the configured step count.
    pub fn regenerate_latent(&self, image: &ImageGrid, strength: f64, seed: u64) -> Result<Latent> {
        let t = self.schedule.timestep_for_strength(strength)?;
        let x_t = self.add_noise(image, t, seed)?;
        self.denoise_latent(&x_t, t, self.config.sampling_steps.min(t.max(1)))
    }

    /// Mean ε-prediction MSE over `images` with noise drawn from `seed`.
    pub fn epsilon_loss(&self, images: &[&ImageGrid], seed: u64) -> Result<f64> {
        let losses = par::map_indices(images.len(), |i| -> Result<f64> {
            let mut rng = derived_rng(seed, "ddpm-validation", i as u64);
            let t = rng.gen_range(1..=self.schedule.len());
            let img = images[i];
            self.check_shape(img.height(), img.width(), img.channels())?;
            let ab = self.schedule.alpha_bar(t)?;
            let y = LatentCodec.encode(img);
            let eps: Vec<f64> = (0..y.data.len()).map(|_| rng.sample(StandardNormal)).collect();
            let data = y.data.iter().zip(&eps).map(|(v, e)| ab.sqrt() * v + (1.0 - ab).sqrt() * e).collect();
            let pred = self.predict_noise(&Latent { data, ..y }, t)?;
            Ok(pred.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64)
        });
        let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let extra = serde_json::json!({
            "trained": self.trained,
            "report": self.report,
            "alpha_bars": self.schedule.alpha_bars(),
            "data_mean": self.data_mean,
            "data_std": self.data_std,
        });
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.training_seed, &self.net.layout, self.params.clone())?
            .with_extra(&extra)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Extra {
            trained: bool,
            report: Option<DdpmTrainReport>,
        }
        let mut model = Self::initialise(ck.config()?, ck.header.seed)?;
        ck.expect(CHECKPOINT_KIND, &model.net.layout)?;
        let extra: Extra = ck.extra()?;
        model.set_params(ck.data.clone());
        model.trained = extra.trained;
        model.report = extra.report;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean PSNR between images and their regenerations at `strength`.
pub fn regeneration_psnr(model: &DiffusionModel, images: &[&ImageGrid], strength: f64, seed: u64) -> Result<f64> {
    let vals = par::map_indices(images.len(), |i| -> Result<f64> {
        let out = LatentCodec.decode(&model.regenerate_latent(images[i], strength, seed.wrapping_add(i as u64))?)?;
        psnr(images[i], &out)
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

fn sample_gradient(net: &UNet, params: &[f32], x0: &[f32], t: usize, ab: f64, eps: &[f32]) -> (f64, Vec<f32>) {
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let xt: Vec<f32> = x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect();
    let (pred, tape) = net.forward(params, &xt, t - 1);
    let n = eps.len() as f32;
    let loss = pred.iter().zip(eps).map(|(p, e)| ((p - e) as f64).powi(2)).sum::<f64>() / n as f64;
    let dout: Vec<f32> = pred.iter().zip(eps).map(|(p, e)| 2.0 * (p - e) / n).collect();
    let mut grads = vec![0f32; params.len()];
    net.backward(params, &tape, &dout, &mut grads);
    (loss, grads)
}

/// Trains the denoiser on the corpus training split (single precision, Adam,
/// parameter EMA), then applies the regeneration quality gate.
pub fn train_ddpm(corpus: &Corpus, config: &DdpmConfig, seed: u64) -> Result<DiffusionModel> {
    let model = train_ddpm_ungated(corpus, config, seed)?;
    let psnr_db = model.report.as_ref().map_or(f64::NAN, |r| r.gate_psnr_db);
    if !(psnr_db >= config.gate_psnr_db) {
        return Err(LabError::ModelUnderTrained { psnr_db, required_db: config.gate_psnr_db });
    }
    Ok(model)
}

/// As [`train_ddpm`] without failing on the gate; the report still carries
/// the gate measurement.
pub fn train_ddpm_ungated(corpus: &Corpus, config: &DdpmConfig, seed: u64) -> Result<DiffusionModel> {
    let mut model = DiffusionModel::initialise(config.clone(), seed)?;
    let train: Vec<&ImageGrid> = corpus.train_images().collect();
    if train.is_empty() {
        return Err(LabError::InvalidSplit("diffusion training needs a non-empty training split".into()));
    }
    for img in &train {
        model.check_shape(img.height(), img.width(), img.channels())?;
    }
    let data: Vec<Vec<f32>> = train.iter().map(|i| LatentCodec.encode(i).to_planar()).collect();
    let net = model.net.clone();
    let mut params: Vec<f32> = nn::from_f64(&model.params);
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut ema = Ema::new(&params, config.ema_decay);
    let big_t = model.schedule.len();
    let mut final_loss = f64::NAN;
    for step in 0..config.training_steps {
        let mut rng = derived_rng(seed, "ddpm-batch", step as u64);
        let draws: Vec<(usize, usize, Vec<f32>)> = (0..config.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..data.len());
                let t = rng.gen_range(1..=big_t);
                let eps = (0..data[i].len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                (i, t, eps)
            })
            .collect();
        let per_sample = par::map_slice(&draws, |(i, t, eps)| {
            let ab = model.schedule.alpha_bars()[t - 1];
            sample_gradient(&net, &params, &data[*i], *t, ab, eps)
        });
        // fixed-order reduction keeps parallel and sequential builds identical
        let mut grads = vec![0f32; params.len()];
        let mut loss = 0.0;
        let inv = 1.0 / config.batch_size as f32;
        for (l, g) in &per_sample {
            loss += l / config.batch_size as f64;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
        }
        opt.lr = config.learning_rate_at(step);
        opt.step(&mut params, &grads);
        ema.update(&params);
        final_loss = loss;
        if step % 500 == 0 {
            log::info!("ddpm step {step}: loss {loss:.4} (lr {:.1e})", opt.lr);
        }
    }
    model.set_params(nn::to_f64(&ema.shadow));
    model.trained = true;
    let heldout: Vec<&ImageGrid> = if corpus.split.test.is_empty() { train } else { corpus.test_images().collect() };
    let validation_loss = model.epsilon_loss(&heldout, seed)?;
    let gate_set = &heldout[..heldout.len().min(config.gate_images)];
    let gate_psnr_db = regeneration_psnr(&model, gate_set, config.gate_strength, seed)?;
    log::info!("ddpm trained: validation loss {validation_loss:.4}, gate PSNR {gate_psnr_db:.2} dB");
    model.report = Some(DdpmTrainReport { final_loss, validation_loss, gate_psnr_db });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_corpus, synthetic_corpus, SyntheticStyle};

    fn tiny() -> DdpmConfig {
        DdpmConfig { width: 4, image_size: 8, training_steps: 20, batch_size: 4, gate_images: 4, ..DdpmConfig::default() }
    }

    fn tiny_corpus() -> Corpus {
        let c = synthetic_corpus(24, &SyntheticStyle { size: 8, ..SyntheticStyle::default() }, 1);
        split_corpus(&c, 0.75, 1).unwrap()
    }

    #[test]
    fn learning_rate_holds_then_decays_to_the_floor() {
        let c = DdpmConfig { training_steps: 100, learning_rate: 1.0, lr_decay_start: 0.5, lr_floor: 0.1, ..DdpmConfig::default() };
        assert_eq!(c.learning_rate_at(0), 1.0);
        assert_eq!(c.learning_rate_at(50), 1.0);
        assert!((c.learning_rate_at(75) - 0.55).abs() < 1e-12);
        assert!((c.learning_rate_at(100) - 0.1).abs() < 1e-12);
        let rates: Vec<f64> = (0..100).map(|k| c.learning_rate_at(k)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_timestep_noise_is_identity() {
        let model = DiffusionModel::initialise(tiny(), 1).unwrap();
        let img = &tiny_corpus().images[0];
        let x = model.add_noise(img, 0, 5).unwrap();
        assert_eq!(LatentCodec.decode(&x).unwrap(), *img);
        assert_eq!(model.denoise_from(&x, 0, 1).unwrap(), *img);
        assert!(model.add_noise(img, 1001, 5).is_err());
    }

    #[test]
    fn latent_codec_round_trip_is_exact() {
        for img in &tiny_corpus().images {
            assert_eq!(LatentCodec.decode(&LatentCodec.encode(img)).unwrap(), *img);
        }
    }

    #[test]
    fn planar_layout_round_trip() {
        let l = Latent { height: 2, width: 3, channels: 3, data: (0..18).map(f64::from).collect() };
        let p: Vec<f64> = l.to_planar();
        assert_eq!(&p[..6], &[0.0, 3.0, 6.0, 9.0, 12.0, 15.0]);
        assert_eq!(Latent::from_planar(&l, &p), l);
    }

    #[test]
    fn denoising_is_deterministic_and_in_range() {
        let model = DiffusionModel::initialise(tiny(), 2).unwrap();
        let img = &tiny_corpus().images[1];
        let x = model.add_noise(img, 300, 7).unwrap();
        let a = model.denoise_latent(&x, 300, 50).unwrap();
        let b = model.denoise_latent(&x, 300, 50).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(model.denoise_latent(&x, 300, 301).is_err());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let corpus = tiny_corpus();
        let a = train_ddpm_ungated(&corpus, &tiny(), 3).unwrap();
        let b = train_ddpm_ungated(&corpus, &tiny(), 3).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.is_trained());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        a.save(&path).unwrap();
        let back = DiffusionModel::load(&path).unwrap();
        assert_eq!(back.params(), a.params());
        assert_eq!(back.report(), a.report());
        let img = &corpus.images[0];
        assert_eq!(back.regenerate_latent(img, 0.2, 1).unwrap(), a.regenerate_latent(img, 0.2, 1).unwrap());
    }
}
