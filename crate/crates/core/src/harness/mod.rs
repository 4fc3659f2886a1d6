//! Experiment orchestration: model preparation with a checkpoint cache, the
//! evaluation grid, the strength sweep, MI curves and report emission.

pub mod cache;
pub mod config;
pub mod grid;
mod plots;
pub mod report;

use std::path::Path;

use log::info;
use serde_json::json;

pub use cache::CheckpointCache;
pub use config::{default_grid, AttackSettings, CodecKind, CodecSettings, CorpusSettings, RunConfig};
pub use grid::{run_evaluation_grid, run_strength_sweep, AttackReport, Evaluation, Metric, SummaryTable, SweepPoint};
pub use report::{emit_report, ReportBundle};

use crate::corpus::{load_corpus, split_corpus, synthetic_corpus, Corpus, SyntheticStyle};
use crate::diffusion::{self, DiffusionModel};
use crate::error::{LabError, Result};
use crate::rng::derived_rng;
use crate::theory::{analytic_mi_curve, dpi_consistency, DpiReport, MiCurve};
use crate::watermark::learned::{self, LearnedCodec};
use crate::watermark::ss::SsCodec;
use crate::watermark::{Payload, WatermarkCodec};

/// Loads or generates the corpus and splits it with the master seed.
pub fn build_corpus(config: &RunConfig) -> Result<Corpus> {
    let c = &config.corpus;
    let full = match &c.dir {
        Some(dir) => load_corpus(dir, c.image_size)?,
        None => synthetic_corpus(c.synthetic_count, &SyntheticStyle { size: c.image_size, ..Default::default() }, config.seed),
    };
    if c.test_count >= full.len() {
        return Err(LabError::InvalidSplit(format!("{} test images requested from {}", c.test_count, full.len())));
    }
    let train_fraction = 1.0 - c.test_count as f64 / full.len() as f64;
    split_corpus(&full, train_fraction, config.seed)
}

/// Everything a run needs: the split corpus, the enabled codecs and, once
/// requested, the diffusion model.
pub struct Lab {
    config: RunConfig,
    corpus: Corpus,
    ss: Option<SsCodec>,
    learned: Option<LearnedCodec>,
    model: Option<DiffusionModel>,
    cache: CheckpointCache,
}

impl Lab {
    /// Resolves the config, builds the corpus and obtains every enabled codec
    /// (training the learned one if it is not cached and training is allowed).
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let config = config.resolved()?;
        let corpus = build_corpus(&config)?;
        info!("corpus: {} train / {} test images", corpus.split.train.len(), corpus.split.test.len());
        let cache = CheckpointCache::new(&config.checkpoint_dir);
        let n = config.corpus.image_size;
        let ss = config
            .codec
            .enabled
            .contains(&CodecKind::Ss)
            .then(|| SsCodec::new(config.ss_key(), config.codec.ss, n, n))
            .transpose()?;
        let mut lab = Self { config, corpus, ss, learned: None, model: None, cache };
        if lab.config.codec.enabled.contains(&CodecKind::Learned) {
            lab.learned = Some(lab.obtain_learned()?);
        }
        Ok(lab)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn ss(&self) -> Option<&SsCodec> {
        self.ss.as_ref()
    }

    pub fn learned(&self) -> Option<&LearnedCodec> {
        self.learned.as_ref()
    }

    pub fn model(&self) -> Option<&DiffusionModel> {
        self.model.as_ref()
    }

    /// Enabled codecs in config order.
    pub fn codecs(&self) -> Vec<&dyn WatermarkCodec> {
        self.config
            .codec
            .enabled
            .iter()
            .filter_map(|k| match k {
                CodecKind::Ss => self.ss.as_ref().map(|c| c as &dyn WatermarkCodec),
                CodecKind::Learned => self.learned.as_ref().map(|c| c as &dyn WatermarkCodec),
            })
            .collect()
    }

    pub fn codec(&self, kind: CodecKind) -> Result<&dyn WatermarkCodec> {
        let c = match kind {
            CodecKind::Ss => self.ss.as_ref().map(|c| c as &dyn WatermarkCodec),
            CodecKind::Learned => self.learned.as_ref().map(|c| c as &dyn WatermarkCodec),
        };
        c.ok_or_else(|| LabError::Config(format!("codec {} is not enabled", kind.as_str())))
    }

    /// Corpus indices of the evaluated test images.
    pub fn eval_indices(&self) -> &[usize] {
        let test = &self.corpus.split.test;
        &test[..self.config.corpus.eval_limit.unwrap_or(test.len()).min(test.len())]
    }

    /// Fresh seeded payload for corpus image `index`, shared by all codecs.
    pub fn payload_for(&self, index: usize) -> Payload {
        Payload::random(self.config.payload_length, &mut derived_rng(self.config.seed, "payload", index as u64))
    }

    fn corpus_key(&self) -> serde_json::Value {
        let c = &self.config.corpus;
        json!({
            "dir": c.dir,
            "synthetic_count": c.synthetic_count,
            "image_size": c.image_size,
            "test_count": c.test_count,
            "seed": self.config.seed,
        })
    }

    pub fn learned_checkpoint_path(&self) -> Result<std::path::PathBuf> {
        let key = json!({ "corpus": self.corpus_key(), "codec": self.config.codec.learned });
        self.cache.path(learned::CHECKPOINT_KIND, &key)
    }

    /// Training-relevant DDPM settings: sampling steps and the quality gate
    /// are left out.
    pub fn ddpm_checkpoint_path(&self) -> Result<std::path::PathBuf> {
        let d = &self.config.diffusion;
        let key = json!({
            "corpus": self.corpus_key(),
            "width": d.width,
            "image_size": d.image_size,
            "image_channels": d.image_channels,
            "schedule": d.schedule,
            "training_steps": d.training_steps,
            "batch_size": d.batch_size,
            "learning_rate": d.learning_rate,
            "lr_decay_start": d.lr_decay_start,
            "lr_floor": d.lr_floor,
            "ema_decay": d.ema_decay,
        });
        self.cache.path(diffusion::CHECKPOINT_KIND, &key)
    }

    fn obtain_learned(&self) -> Result<LearnedCodec> {
        let path = self.learned_checkpoint_path()?;
        if path.exists() {
            info!("loading learned codec from {}", path.display());
            let codec = LearnedCodec::load(&path)?;
            if codec.config() != &self.config.codec.learned {
                return Err(LabError::Checkpoint(format!("{} holds a different codec config", path.display())));
            }
            return Ok(codec);
        }
        if !self.config.train_if_missing {
            return Err(LabError::ModelUnavailable(format!("no learned codec at {}", path.display())));
        }
        info!("training learned codec ({} steps)", self.config.codec.learned.training_steps);
        let (codec, report) = learned::train_codec(&self.corpus, &self.config.codec.learned, self.config.seed)?;
        info!("learned codec: {report:?}");
        std::fs::create_dir_all(self.cache.dir())?;
        codec.save(&path)?;
        Ok(codec)
    }

    /// Loads the cached diffusion model or trains it (gated on regeneration
    /// quality).
    pub fn ensure_model(&mut self) -> Result<&DiffusionModel> {
        if self.model.is_none() {
            let path = self.ddpm_checkpoint_path()?;
            let mut model = if path.exists() {
                info!("loading diffusion model from {}", path.display());
                DiffusionModel::load(&path)?
            } else if self.config.train_if_missing {
                info!("training diffusion model ({} steps)", self.config.diffusion.training_steps);
                let m = diffusion::train_ddpm(&self.corpus, &self.config.diffusion, self.config.seed)?;
                info!("diffusion model: {:?}", m.report());
                std::fs::create_dir_all(self.cache.dir())?;
                m.save(&path)?;
                m
            } else {
                return Err(LabError::ModelUnavailable(format!("no diffusion model at {}", path.display())));
            };
            model.set_sampling_steps(self.config.diffusion.sampling_steps)?;
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("model was just set"))
    }

    /// Per-bit amplitude of the spread-spectrum codec in model space, the
    /// signal level of the analytic channel.
    pub fn channel_amplitude(&self) -> Result<f64> {
        match &self.ss {
            Some(ss) => Ok(ss.bit_amplitude_normalized()),
            None => {
                let n = self.config.corpus.image_size;
                Ok(SsCodec::new(self.config.ss_key(), self.config.codec.ss, n, n)?.bit_amplitude_normalized())
            }
        }
    }

    /// Analytic MI over every timestep of the configured schedule.
    pub fn analytic_mi(&self) -> Result<MiCurve> {
        analytic_mi_curve(&self.config.diffusion.schedule.build()?, self.channel_amplitude()?)
    }

    /// Plug-in MI of the spread-spectrum decoder after regeneration against
    /// the analytic bound at the configured strengths.
    pub fn dpi_report(&mut self) -> Result<DpiReport> {
        self.ensure_model()?;
        self.empirical_mi()
    }

    /// As [`Lab::dpi_report`] with the diffusion model already loaded.
    pub fn empirical_mi(&self) -> Result<DpiReport> {
        let amplitude = self.channel_amplitude()?;
        let model = self.model.as_ref().ok_or_else(|| LabError::ModelUnavailable("diffusion model not loaded".into()))?;
        let ss = self.ss.as_ref().ok_or_else(|| LabError::Config("the MI comparison needs the ss codec".into()))?;
        let mut corpus = self.corpus.clone();
        corpus.split.test = self.eval_indices().to_vec();
        dpi_consistency(amplitude, model, ss, &corpus, &self.config.attacks.dpi_strengths, self.config.seed)
    }

    pub fn write_manifest(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        self.corpus.write_manifest(&out.join("split_manifest.txt"))
    }
}
