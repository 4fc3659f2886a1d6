use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Linear-β noise schedule with cumulative signal retention `ᾱ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(LabError::InvalidParam(format!(
                "schedule needs ≥ 2 steps and 0 < β_start < β_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(LabError::InvalidParam(format!("timestep {t} outside 0..={}", self.len()))),
        }
    }

    /// Timestep reached by strength `s`: `round(s·T)`.
    pub fn timestep_for_strength(&self, strength: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(LabError::InvalidParam(format!("strength {strength} outside [0, 1]")));
        }
        Ok((strength * self.len() as f64).round() as usize)
    }

    /// `round(linspace(t, 0, count + 1))`: the re-spaced reverse trajectory.
    pub fn respaced(&self, t: usize, count: usize) -> Vec<usize> {
        (0..=count).map(|i| (t as f64 * (1.0 - i as f64 / count as f64)).round() as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_invariants() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.betas().windows(2).all(|w| 0.0 < w[0] && w[0] < w[1] && w[1] < 1.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = DiffusionSchedule::default();
        for t in [1, 10, 300, 1000] {
            let direct: f64 = (1..=t).map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 999.0)).product();
            assert!((s.alpha_bar(t).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn respacing_endpoints() {
        let s = DiffusionSchedule::default();
        let ts = s.respaced(300, 50);
        assert_eq!((ts[0], ts[50], ts.len()), (300, 0, 51));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.timestep_for_strength(0.3).unwrap(), 300);
        assert!(s.timestep_for_strength(1.5).is_err());
    }
}
