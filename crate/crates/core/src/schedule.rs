//! Diffusion noise schedules.
//!
//! Steps are 1-based (`t ∈ 1..=T`); arrays are stored 0-based so entry
//! `t − 1` belongs to step `t`. `ᾱ_0 = 1` by convention.

use ndarray::{ArrayBase, Data, Dimension, OwnedRepr, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Returned by [`NoiseSchedule::snr_forward`] when `1 − ᾱ_t` underflows to zero.
pub const SNR_SATURATION: f64 = 1e12;

/// Which ratio stands in for the forward-process SNR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrForwardKind {
    /// `ᾱ_t / (1 − ᾱ_t)`.
    #[default]
    Cumulative,
    /// `α_t / (1 − α_t)`, the raw per-step β ratio.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub eta: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_calibrated: Option<Vec<f64>>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_min` to `beta_max` over `steps` steps, with
    /// reverse-step standard deviations from the η-family
    /// `σ_t = η·√((1−ᾱ_{t−1})/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_{t−1})`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidConfig(format!("eta must lie in [0, 1], got {eta}")));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let mut sched = NoiseSchedule {
            steps,
            eta,
            beta,
            alpha,
            alpha_bar,
            sigma: Vec::new(),
            sigma_calibrated: None,
        };
        sched.sigma = (1..=steps).map(|t| sched.eta_sigma(t)).collect();
        if sched.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(
                "alpha_bar is not strictly decreasing (beta too small for f64)".into(),
            ));
        }
        Ok(sched)
    }

    fn eta_sigma(&self, t: usize) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        let ab = self.alpha_bar[t - 1];
        let ab_prev = self.alpha_bar_prev(t);
        let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
        self.eta * var.max(0.0).sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidStep {
                t,
                steps: self.steps,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t−1}`, with `ᾱ_0 = 1`.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn sigma_calibrated(&self, t: usize) -> Option<f64> {
        self.sigma_calibrated.as_ref().map(|s| s[t - 1])
    }

    /// Copy of the schedule carrying a calibrated σ'.
    pub fn with_calibrated(&self, sigma_calibrated: Vec<f64>) -> Result<Self> {
        if sigma_calibrated.len() != self.steps {
            return Err(Error::InvalidInput(format!(
                "calibrated sigma has {} entries, schedule has {} steps",
                sigma_calibrated.len(),
                self.steps
            )));
        }
        if let Some((i, _)) = sigma_calibrated
            .iter()
            .zip(&self.sigma)
            .enumerate()
            .find(|(_, (c, s))| !(**c >= 0.0 && **c <= **s))
        {
            return Err(Error::Validation(format!(
                "calibrated sigma at step {} is outside [0, sigma]",
                i + 1
            )));
        }
        Ok(NoiseSchedule {
            sigma_calibrated: Some(sigma_calibrated),
            ..self.clone()
        })
    }

    /// Forward-process signal-to-noise ratio at step `t`.
    pub fn snr_forward(&self, t: usize, kind: SnrForwardKind) -> Result<f64> {
        self.check_step(t)?;
        let a = match kind {
            SnrForwardKind::Cumulative => self.alpha_bar(t),
            SnrForwardKind::PerStep => self.alpha(t),
        };
        let denom = 1.0 - a;
        if denom <= 0.0 {
            return Ok(SNR_SATURATION);
        }
        Ok((a / denom).min(SNR_SATURATION))
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · z`.
    pub fn forward_diffuse<S1, S2, D>(
        &self,
        x0: &ArrayBase<S1, D>,
        t: usize,
        z: &ArrayBase<S2, D>,
    ) -> Result<ArrayBase<OwnedRepr<f64>, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        self.check_step(t)?;
        if x0.shape() != z.shape() {
            return Err(Error::InvalidInput(format!(
                "noise shape {:?} does not match data shape {:?}",
                z.shape(),
                x0.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(x0).and(z).map_collect(|&x, &e| s * x + n * e))
    }
}
