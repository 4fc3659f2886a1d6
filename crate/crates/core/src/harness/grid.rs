//! The evaluation grid and the strength sweep.

use serde::{Deserialize, Serialize};

use super::{Lab, RunConfig};
use crate::attacks::{AttackContext, AttackSpec};
use crate::error::{LabError, Result};
use crate::metrics::{bit_metrics, fidelity, DecodeMetrics, FidelityMetrics};
use crate::par;

/// One (image, codec, attack) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub image_id: String,
    pub codec: String,
    pub attack: AttackSpec,
    pub decode: DecodeMetrics,
    pub vs_watermarked: FidelityMetrics,
    pub vs_original: FidelityMetrics,
    /// `t/T` of diffusion attacks after rounding to a whole timestep.
    pub t_frac: Option<f64>,
    pub one_minus_alpha_bar: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BitAcc,
    Ber,
    Success,
    PsnrVsWm,
    SsimVsWm,
    PsnrVsOrig,
    SsimVsOrig,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::BitAcc,
        Metric::Ber,
        Metric::Success,
        Metric::PsnrVsWm,
        Metric::SsimVsWm,
        Metric::PsnrVsOrig,
        Metric::SsimVsOrig,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::BitAcc => "bit_acc",
            Metric::Ber => "ber",
            Metric::Success => "success",
            Metric::PsnrVsWm => "psnr_vs_wm",
            Metric::SsimVsWm => "ssim_vs_wm",
            Metric::PsnrVsOrig => "psnr_vs_orig",
            Metric::SsimVsOrig => "ssim_vs_orig",
        }
    }

    pub fn of(self, r: &AttackReport) -> f64 {
        match self {
            Metric::BitAcc => r.decode.bit_accuracy,
            Metric::Ber => r.decode.ber,
            Metric::Success => f64::from(u8::from(r.decode.payload_success)),
            Metric::PsnrVsWm => r.vs_watermarked.psnr_db,
            Metric::SsimVsWm => r.vs_watermarked.ssim,
            Metric::PsnrVsOrig => r.vs_original.psnr_db,
            Metric::SsimVsOrig => r.vs_original.ssim,
        }
    }
}

fn base_label(spec: &AttackSpec) -> String {
    match spec {
        AttackSpec::Identity => "No Attack".into(),
        AttackSpec::JpegLike { quality } => format!("JPEG-{quality}"),
        AttackSpec::GaussianNoise { .. } => "Noise".into(),
        AttackSpec::Crop { .. } => "Crop".into(),
        AttackSpec::Affine { .. } => "Affine".into(),
        AttackSpec::Blur { .. } => "Blur".into(),
        AttackSpec::Sharpen { .. } => "Sharpen".into(),
        AttackSpec::Regeneration { .. } => "Regeneration".into(),
        AttackSpec::GuidedRemoval { .. } => "Guided Removal".into(),
    }
}

/// Summary column headers. Kinds that appear more than once get their
/// parameters appended so every header is unique.
pub fn column_labels(attacks: &[AttackSpec]) -> Vec<String> {
    let bases: Vec<String> = attacks.iter().map(base_label).collect();
    attacks
        .iter()
        .zip(&bases)
        .map(|(a, b)| match bases.iter().filter(|x| *x == b).count() {
            1 => b.clone(),
            _ => format!("{b} {}", a.params_json()),
        })
        .collect()
}

/// Corpus means per (codec, attack) for every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub attacks: Vec<AttackSpec>,
    pub columns: Vec<String>,
    pub codecs: Vec<String>,
    /// `cells[codec][attack]`: one mean per metric in [`Metric::ALL`] order.
    pub cells: Vec<Vec<[f64; 7]>>,
    /// Rows contributing to each cell.
    pub counts: Vec<Vec<usize>>,
}

impl SummaryTable {
    /// Aggregates rows; attacks and codecs are ordered by first appearance
    /// with the identity attack first.
    pub fn from_rows(rows: &[AttackReport]) -> Self {
        let mut attacks = vec![AttackSpec::Identity];
        let mut codecs: Vec<String> = Vec::new();
        for r in rows {
            if !attacks.contains(&r.attack) {
                attacks.push(r.attack.clone());
            }
            if !codecs.contains(&r.codec) {
                codecs.push(r.codec.clone());
            }
        }
        let mut sums = vec![vec![[0.0; 7]; attacks.len()]; codecs.len()];
        let mut counts = vec![vec![0usize; attacks.len()]; codecs.len()];
        for r in rows {
            let c = codecs.iter().position(|x| *x == r.codec).expect("codec collected above");
            let a = attacks.iter().position(|x| *x == r.attack).expect("attack collected above");
            for (m, metric) in Metric::ALL.iter().enumerate() {
                sums[c][a][m] += metric.of(r);
            }
            counts[c][a] += 1;
        }
        let cells = sums
            .iter()
            .zip(&counts)
            .map(|(row, ns)| {
                row.iter().zip(ns).map(|(s, &n)| s.map(|v| if n == 0 { f64::NAN } else { v / n as f64 })).collect()
            })
            .collect();
        let columns = column_labels(&attacks);
        Self { attacks, columns, codecs, cells, counts }
    }

    pub fn get(&self, codec: &str, column: &str, metric: Metric) -> Option<f64> {
        let c = self.codecs.iter().position(|x| x == codec)?;
        let a = self.columns.iter().position(|x| x == column)?;
        let m = Metric::ALL.iter().position(|x| *x == metric)?;
        Some(self.cells[c][a][m])
    }

    /// Mean of `metric` for the first column whose attack has `kind`.
    pub fn get_kind(&self, codec: &str, kind: &str, metric: Metric) -> Option<f64> {
        let a = self.attacks.iter().position(|x| x.kind() == kind)?;
        self.get(codec, &self.columns[a], metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<AttackReport>,
    pub summary: SummaryTable,
}

/// Corpus means of one diffusion attack at one strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub codec: String,
    pub attack: String,
    pub strength: f64,
    pub t_frac: f64,
    pub one_minus_alpha_bar: f64,
    pub bit_acc: f64,
    pub success: f64,
    pub psnr_vs_wm: f64,
    pub ssim_vs_wm: f64,
}

impl Lab {
    /// One row per (test image, codec, attack), image-major, codecs and
    /// attacks in the given order. Needs the diffusion model for diffusion
    /// attacks.
    pub fn attack_rows(&self, attacks: &[AttackSpec]) -> Result<Vec<AttackReport>> {
        let schedule = self.config.diffusion.schedule.build()?;
        let timing = attacks
            .iter()
            .map(|a| match a.strength() {
                Some(s) => {
                    let t = schedule.timestep_for_strength(s)?;
                    Ok((Some(t as f64 / schedule.len() as f64), Some(1.0 - schedule.alpha_bar(t)?)))
                }
                None => Ok((None, None)),
            })
            .collect::<Result<Vec<_>>>()?;
        let indices = self.eval_indices();
        let codecs = self.codecs();
        let per_image = par::map_indices(indices.len(), |k| -> Result<Vec<AttackReport>> {
            let i = indices[k];
            let original = &self.corpus.images[i];
            let payload = self.payload_for(i);
            let mut rows = Vec::with_capacity(codecs.len() * attacks.len());
            for &codec in &codecs {
                let marked = codec.embed(original, &payload)?;
                let ctx = AttackContext { model: self.model.as_ref(), decoder: Some(codec) };
                for (attack, &(t_frac, one_minus_alpha_bar)) in attacks.iter().zip(&timing) {
                    let attacked = attack.apply(&marked, ctx, i as u64)?;
                    rows.push(AttackReport {
                        image_id: self.corpus.names[i].clone(),
                        codec: codec.name().to_string(),
                        attack: attack.clone(),
                        decode: bit_metrics(&payload, &codec.decode(&attacked)?)?,
                        vs_watermarked: fidelity(&marked, &attacked)?,
                        vs_original: fidelity(original, &attacked)?,
                        t_frac,
                        one_minus_alpha_bar,
                    });
                }
            }
            Ok(rows)
        });
        let mut rows = Vec::new();
        for r in per_image {
            rows.extend(r?);
        }
        Ok(rows)
    }

    /// Every test image through every codec and every grid attack, plus the
    /// corpus-mean summary.
    pub fn evaluate(&mut self) -> Result<Evaluation> {
        if self.config.needs_diffusion() {
            self.ensure_model()?;
        }
        self.grid_evaluation()
    }

    /// As [`Lab::evaluate`] with the diffusion model already loaded.
    pub fn grid_evaluation(&self) -> Result<Evaluation> {
        let rows = self.attack_rows(&self.config.attack_grid())?;
        let summary = SummaryTable::from_rows(&rows);
        Ok(Evaluation { rows, summary })
    }

    /// Regeneration at every strength and guided removal at every nonzero
    /// strength, with one shared noise seed so the two curves see identical
    /// noise. Guidance settings come from the first guided attack of the grid.
    pub fn sweep(&mut self, strengths: &[f64]) -> Result<Vec<SweepPoint>> {
        self.ensure_model()?;
        self.strength_sweep(strengths)
    }

    /// As [`Lab::sweep`] with the diffusion model already loaded.
    pub fn strength_sweep(&self, strengths: &[f64]) -> Result<Vec<SweepPoint>> {
        if let Some(s) = strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(LabError::InvalidParam(format!("sweep strength {s} outside [0, 1]")));
        }
        let seed = self.config.attacks.sweep_seed;
        let (lambda_weight, gradient_steps, target_hex) = self
            .config
            .attacks
            .grid
            .iter()
            .find_map(|a| match a {
                AttackSpec::GuidedRemoval { lambda_weight, gradient_steps, target_hex, .. } => {
                    Some((*lambda_weight, *gradient_steps, target_hex.clone()))
                }
                _ => None,
            })
            .unwrap_or((0.5, 1, None));
        let mut attacks: Vec<AttackSpec> = strengths.iter().map(|&strength| AttackSpec::Regeneration { strength, seed }).collect();
        attacks.extend(strengths.iter().filter(|s| **s > 0.0).map(|&strength| AttackSpec::GuidedRemoval {
            strength,
            lambda_weight,
            gradient_steps,
            target_hex: target_hex.clone(),
            seed,
        }));
        let rows = self.attack_rows(&attacks)?;
        let summary = SummaryTable::from_rows(&rows);
        let mut points = Vec::new();
        for codec in &summary.codecs {
            for (a, attack) in summary.attacks.iter().enumerate() {
                let Some(strength) = attack.strength() else { continue };
                let ci = summary.codecs.iter().position(|c| c == codec).expect("codec from summary");
                if summary.counts[ci][a] == 0 {
                    continue;
                }
                let row = rows.iter().find(|r| r.attack == *attack).expect("attack has rows");
                let cell = &summary.cells[ci][a];
                points.push(SweepPoint {
                    codec: codec.clone(),
                    attack: attack.kind().to_string(),
                    strength,
                    t_frac: row.t_frac.unwrap_or(0.0),
                    one_minus_alpha_bar: row.one_minus_alpha_bar.unwrap_or(0.0),
                    bit_acc: cell[0],
                    success: cell[2],
                    psnr_vs_wm: cell[3],
                    ssim_vs_wm: cell[4],
                });
            }
        }
        Ok(points)
    }
}

/// Prepares models (training them if needed) and runs the grid.
pub fn run_evaluation_grid(config: &RunConfig) -> Result<Evaluation> {
    Lab::prepare(config)?.evaluate()
}

pub fn run_strength_sweep(config: &RunConfig, strengths: &[f64]) -> Result<Vec<SweepPoint>> {
    Lab::prepare(config)?.sweep(strengths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{DecodeMetrics, FidelityMetrics};

    fn row(codec: &str, attack: AttackSpec, acc: f64, psnr: f64) -> AttackReport {
        AttackReport {
            image_id: "x".into(),
            codec: codec.into(),
            attack,
            decode: DecodeMetrics { bit_accuracy: acc, ber: 1.0 - acc, payload_success: acc == 1.0 },
            vs_watermarked: FidelityMetrics { psnr_db: psnr, ssim: 1.0 },
            vs_original: FidelityMetrics { psnr_db: psnr, ssim: 1.0 },
            t_frac: None,
            one_minus_alpha_bar: None,
        }
    }

    #[test]
    fn labels_follow_the_summary_layout() {
        let labels = column_labels(&super::super::default_grid());
        assert_eq!(labels, ["No Attack", "JPEG-50", "Crop", "Noise", "Regeneration", "Guided Removal"]);
        let dup = column_labels(&[AttackSpec::Crop { area_fraction: 0.1 }, AttackSpec::Crop { area_fraction: 0.2 }]);
        assert_eq!(dup, [r#"Crop {"area_fraction":0.1}"#, r#"Crop {"area_fraction":0.2}"#]);
    }

    #[test]
    fn summary_cells_are_row_means() {
        let jpeg = AttackSpec::JpegLike { quality: 50 };
        let rows = vec![
            row("ss", AttackSpec::Identity, 1.0, f64::INFINITY),
            row("ss", jpeg.clone(), 0.75, 30.0),
            row("learned", AttackSpec::Identity, 1.0, f64::INFINITY),
            row("learned", jpeg.clone(), 0.5, 20.0),
            row("ss", AttackSpec::Identity, 1.0, f64::INFINITY),
            row("ss", jpeg, 1.0, 34.0),
        ];
        let s = SummaryTable::from_rows(&rows);
        assert_eq!(s.codecs, ["ss", "learned"]);
        assert_eq!(s.columns, ["No Attack", "JPEG-50"]);
        assert_eq!(s.get("ss", "JPEG-50", Metric::BitAcc), Some(0.875));
        assert_eq!(s.get("ss", "JPEG-50", Metric::Success), Some(0.5));
        assert_eq!(s.get("ss", "JPEG-50", Metric::PsnrVsWm), Some(32.0));
        assert_eq!(s.get("learned", "JPEG-50", Metric::Ber), Some(0.5));
        assert_eq!(s.get("ss", "No Attack", Metric::PsnrVsWm), Some(f64::INFINITY));
        assert_eq!(s.counts, vec![vec![2, 2], vec![1, 1]]);
    }

    #[test]
    fn empty_rows_still_have_the_identity_column() {
        let s = SummaryTable::from_rows(&[]);
        assert_eq!(s.columns, ["No Attack"]);
        assert!(s.codecs.is_empty());
    }
}
