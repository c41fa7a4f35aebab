//! Discrete diffusion noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step variances and their cumulative signal retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_min` to `beta_max` over `steps` entries.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Param(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary non-decreasing betas. The first entry may be exactly zero,
    /// which anchors step 0 at the clean image; every later entry must lie in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Param("schedule needs at least 2 steps".into()));
        }
        for (t, &b) in betas.iter().enumerate() {
            let lower_ok = if t == 0 { b >= 0.0 } else { b > 0.0 };
            if !lower_ok || b >= 1.0 || !b.is_finite() {
                return Err(Error::Param(format!("beta[{t}] = {b} outside (0, 1)")));
            }
            if t > 0 && b < betas[t - 1] {
                return Err(Error::Param(format!("beta decreases at step {t}")));
            }
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of discrete steps `T`.
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

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Param(format!("step {t} outside schedule of {}", self.len())));
        }
        Ok(())
    }

    /// Maps a noise ratio in `[0, 1]` to the nearest step index.
    pub fn ratio_to_step(&self, ratio: f64) -> Result<usize> {
        ratio_to_step(ratio, self)
    }
}

/// Linear schedule constructor under its conventional name.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// `round(ratio·(T−1))`, clamped into `[0, T−1]`.
pub fn ratio_to_step(ratio: f64, sched: &NoiseSchedule) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Param(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let last = sched.len() - 1;
    Ok(((ratio * last as f64).round() as usize).min(last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_hand_product() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn standard_schedule_matches_independent_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // recompute with log-sum rather than a running product
        for t in [0usize, 1, 250, 500, 999] {
            let log_sum: f64 = (0..=t)
                .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
                .sum();
            assert!((s.alpha_bar(t) - log_sum.exp()).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(0) > 0.999 && s.alpha_bar(999) < 1e-3);
    }

    #[test]
    fn inverted_betas_rejected() {
        assert!(matches!(make_schedule(10, 0.2, 0.1), Err(Error::Param(_))));
        assert!(matches!(make_schedule(1, 0.1, 0.1), Err(Error::Param(_))));
        assert!(matches!(make_schedule(10, 0.0, 0.1), Err(Error::Param(_))));
    }

    #[test]
    fn ratio_mapping() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(ratio_to_step(0.0, &s).unwrap(), 0);
        assert_eq!(ratio_to_step(1.0, &s).unwrap(), 999);
        // round(0.5 * 999) = round(499.5) = 500
        assert_eq!(ratio_to_step(0.5, &s).unwrap(), 500);
        assert!(matches!(ratio_to_step(1.2, &s), Err(Error::Param(_))));
        assert!(matches!(ratio_to_step(-0.1, &s), Err(Error::Param(_))));
    }

    #[test]
    fn zero_first_beta_anchors_clean_step() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.1, 0.2]).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0]).is_err());
    }
}
