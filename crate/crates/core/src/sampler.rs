//! Reverse-process steps and trajectory generation.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{apply_corrections, CorrectionStats, SCHEDULE_SLACK};
use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Trajectories per parallel work item. Fixed so that results do not depend
/// on how many workers run.
pub const TRAJECTORY_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CorrectionMode {
    /// Correlated-noise correction.
    pub cnc: bool,
    /// Bias correction.
    pub bc: bool,
    /// Variance-schedule calibration.
    pub vsc: bool,
}

impl CorrectionMode {
    pub const NONE: CorrectionMode = CorrectionMode {
        cnc: false,
        bc: false,
        vsc: false,
    };
    pub const ALL: CorrectionMode = CorrectionMode {
        cnc: true,
        bc: true,
        vsc: true,
    };

    /// `none → cnc → cnc+vsc → cnc+vsc+bc`.
    pub fn ablation_ladder() -> [CorrectionMode; 4] {
        [
            CorrectionMode::NONE,
            CorrectionMode {
                cnc: true,
                ..CorrectionMode::NONE
            },
            CorrectionMode {
                cnc: true,
                vsc: true,
                bc: false,
            },
            CorrectionMode::ALL,
        ]
    }

    pub fn needs_stats(self) -> bool {
        self.cnc || self.bc || self.vsc
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.cnc, "cnc"), (self.vsc, "vsc"), (self.bc, "bc")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, name)| *name)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mode = CorrectionMode::NONE;
        if s.trim() == "none" {
            return Ok(mode);
        }
        for part in s.split('+').map(str::trim) {
            let flag = match part {
                "cnc" => &mut mode.cnc,
                "bc" => &mut mode.bc,
                "vsc" => &mut mode.vsc,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown correction `{other}` in `{s}` (expected none or cnc/vsc/bc joined by +)"
                    )))
                }
            };
            if *flag {
                return Err(Error::InvalidConfig(format!("correction `{part}` repeated in `{s}`")));
            }
            *flag = true;
        }
        Ok(mode)
    }
}

impl TryFrom<String> for CorrectionMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CorrectionMode> for String {
    fn from(m: CorrectionMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Ddim,
}

/// The network to use at every step, e.g. one quantized model for all
/// steps or a per-step choice from a mixed-precision plan.
pub struct Denoiser<'a> {
    per_step: Vec<&'a dyn EpsModel>,
    data_dim: usize,
}

impl<'a> Denoiser<'a> {
    pub fn uniform(model: &'a dyn EpsModel, steps: usize, data_dim: usize) -> Self {
        Denoiser {
            per_step: vec![model; steps],
            data_dim,
        }
    }

    /// `per_step[t − 1]` serves step `t`.
    pub fn per_step(per_step: Vec<&'a dyn EpsModel>, data_dim: usize) -> Self {
        Denoiser { per_step, data_dim }
    }

    pub fn model(&self, t: usize) -> Result<&'a dyn EpsModel> {
        self.per_step
            .get(t.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Uncalibrated(format!("no network assigned to step {t}")))
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }
}

fn effective_eps(
    eps: ArrayView2<'_, f64>,
    t: usize,
    mode: CorrectionMode,
    stats: Option<&CorrectionStats>,
) -> Result<Array2<f64>> {
    if !(mode.cnc || mode.bc) {
        return Ok(eps.to_owned());
    }
    let stats = stats.ok_or_else(|| {
        Error::Uncalibrated(format!("correction mode `{mode}` requires noise statistics"))
    })?;
    apply_corrections(eps, t, stats, mode.cnc, mode.bc)
}

fn effective_sigma(sched: &NoiseSchedule, t: usize, mode: CorrectionMode) -> Result<f64> {
    if mode.vsc {
        sched.sigma_calibrated(t).ok_or_else(|| {
            Error::Uncalibrated("variance-schedule calibration requested but schedule has no calibrated sigma".into())
        })
    } else {
        Ok(sched.sigma(t))
    }
}

fn check_step_inputs(
    x: ArrayView2<'_, f64>,
    t: usize,
    eps: ArrayView2<'_, f64>,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f64>,
) -> Result<()> {
    sched.check_step(t)?;
    if eps.shape() != x.shape() || z.shape() != x.shape() {
        return Err(Error::InvalidInput(format!(
            "state {:?}, prediction {:?} and noise {:?} must share a shape",
            x.shape(),
            eps.shape(),
            z.shape()
        )));
    }
    Ok(())
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε_eff)/√α_t + σ_eff·z`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step(
    x: ArrayView2<'_, f64>,
    t: usize,
    eps: ArrayView2<'_, f64>,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f64>,
    mode: CorrectionMode,
    stats: Option<&CorrectionStats>,
) -> Result<Array2<f64>> {
    check_step_inputs(x, t, eps, sched, z)?;
    let eps = effective_eps(eps, t, mode, stats)?;
    let sigma = effective_sigma(sched, t, mode)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    Ok(Zip::from(x)
        .and(&eps)
        .and(z)
        .map_collect(|&x, &e, &z| (x - coef * e) * inv_sqrt_alpha + sigma * z))
}

/// `x_{t−1} = √ᾱ_{t−1}·(x_t − √(1−ᾱ_t)·ε_eff)/√ᾱ_t + √(1−ᾱ_{t−1}−σ_eff²)·ε_eff + σ_eff·z`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x: ArrayView2<'_, f64>,
    t: usize,
    eps: ArrayView2<'_, f64>,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f64>,
    mode: CorrectionMode,
    stats: Option<&CorrectionStats>,
) -> Result<Array2<f64>> {
    check_step_inputs(x, t, eps, sched, z)?;
    let eps = effective_eps(eps, t, mode, stats)?;
    let sigma = effective_sigma(sched, t, mode)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar_prev(t);
    let rest = 1.0 - ab_prev - sigma * sigma;
    if rest < -SCHEDULE_SLACK {
        return Err(Error::InvalidSchedule(format!(
            "step {t}: 1 - alpha_bar_prev - sigma^2 = {rest} < 0"
        )));
    }
    let dir = rest.max(0.0).sqrt();
    let (sab_prev, sab, s1ab) = (ab_prev.sqrt(), ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x)
        .and(&eps)
        .and(z)
        .map_collect(|&x, &e, &z| sab_prev * (x - s1ab * e) / sab + dir * e + sigma * z))
}

#[allow(clippy::too_many_arguments)]
pub fn step(
    kind: SamplerKind,
    x: ArrayView2<'_, f64>,
    t: usize,
    eps: ArrayView2<'_, f64>,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f64>,
    mode: CorrectionMode,
    stats: Option<&CorrectionStats>,
) -> Result<Array2<f64>> {
    match kind {
        SamplerKind::Ddpm => ddpm_step(x, t, eps, sched, z, mode, stats),
        SamplerKind::Ddim => ddim_step(x, t, eps, sched, z, mode, stats),
    }
}

/// Prior draw `x_T ~ N(0, I)`, one row per stream.
pub(crate) fn draw_prior<R: Rng>(streams: &mut [R], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((streams.len(), dim));
    for (mut row, r) in x.rows_mut().into_iter().zip(streams.iter_mut()) {
        row.iter_mut().for_each(|v| *v = rng::normal(r));
    }
    x
}

/// Step noise `z`; the final step (`t = 1`) adds none and draws nothing.
pub(crate) fn draw_step_noise<R: Rng>(streams: &mut [R], dim: usize, t: usize) -> Array2<f64> {
    if t == 1 {
        return Array2::zeros((streams.len(), dim));
    }
    draw_prior(streams, dim)
}

/// Generate `n` samples by running the reverse process from `x_T ~ N(0, I)`
/// down to `t = 1`.
pub fn generate_samples(
    denoiser: &Denoiser<'_>,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    mode: CorrectionMode,
    stats: Option<&CorrectionStats>,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    generate_samples_with(denoiser, sched, n, seed, |x, t, eps, z| {
        step(kind, x, t, eps, sched, z, mode, stats)
    })
}

/// As [`generate_samples`] with a caller-supplied step rule, used to inject
/// synthetic corruption in verification harnesses.
pub fn generate_samples_with<F>(
    denoiser: &Denoiser<'_>,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    step_fn: F,
) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<'_, f64>, usize, ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<Array2<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    if denoiser.steps() != sched.steps {
        return Err(Error::InvalidInput(format!(
            "denoiser covers {} steps, schedule has {}",
            denoiser.steps(),
            sched.steps
        )));
    }
    let dim = denoiser.data_dim();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(TRAJECTORY_CHUNK)
        .map(|s| (s, (s + TRAJECTORY_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut streams: Vec<_> = (start..end).map(|i| rng::stream(seed, i as u64)).collect();
            let mut x = draw_prior(&mut streams, dim);
            for t in (1..=sched.steps).rev() {
                let eps = denoiser.model(t)?.predict(x.view(), t)?;
                let z = draw_step_noise(&mut streams, dim, t);
                x = step_fn(x.view(), t, eps.view(), z.view())?;
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn sched_with(ab_prev: f64, ab: f64, alpha: f64, sigma: f64) -> NoiseSchedule {
        let mut s = NoiseSchedule::linear(2, 0.01, 0.02, 1.0).unwrap();
        s.alpha_bar = vec![ab_prev, ab];
        s.alpha = vec![1.0 - 0.01, alpha];
        s.beta = vec![0.01, 1.0 - alpha];
        s.sigma = vec![0.0, sigma];
        s
    }

    #[test]
    fn ddpm_scalar_substitution() {
        let s = sched_with(0.95, 0.9, 0.99, 0.0);
        let x = arr2(&[[1.0]]);
        let e = arr2(&[[0.5]]);
        let z = arr2(&[[0.0]]);
        let y = ddpm_step(x.view(), 2, e.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
        let want = (1.0 - 0.01 / 0.1f64.sqrt() * 0.5) / 0.99f64.sqrt();
        assert!((y[[0, 0]] - want).abs() < 1e-15);
        assert!((y[[0, 0]] - 0.989_146).abs() < 1e-6);
    }

    #[test]
    fn ddim_scalar_substitution() {
        let s = sched_with(0.9, 0.8, 0.8 / 0.9, 0.0);
        let x = arr2(&[[1.0]]);
        let e = arr2(&[[0.5]]);
        let z = arr2(&[[0.0]]);
        let y = ddim_step(x.view(), 2, e.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
        let want = 0.9f64.sqrt() * (1.0 - 0.2f64.sqrt() * 0.5) / 0.8f64.sqrt() + 0.1f64.sqrt() * 0.5;
        assert!((y[[0, 0]] - want).abs() < 1e-12, "{}", y[[0, 0]]);
        assert!((y[[0, 0]] - 0.981_603_2).abs() < 1e-7);

        let zero = arr2(&[[0.0]]);
        let y = ddim_step(x.view(), 2, zero.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
        assert!((y[[0, 0]] - (0.9f64 / 0.8).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity_corrections_match_plain_step() {
        let mut s = NoiseSchedule::linear(10, 1e-3, 0.1, 1.0).unwrap();
        s = s.with_calibrated(s.sigma.clone()).unwrap();
        let stats = CorrectionStats::zero(10, 2, 4);
        let x = arr2(&[[0.3, -1.2], [2.0, 0.1]]);
        let e = arr2(&[[0.5, 0.2], [-0.7, 1.1]]);
        let z = arr2(&[[0.1, 0.4], [-0.3, 0.9]]);
        for kind in [SamplerKind::Ddpm, SamplerKind::Ddim] {
            let plain = step(kind, x.view(), 5, e.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
            let with_stats =
                step(kind, x.view(), 5, e.view(), &s, z.view(), CorrectionMode::NONE, Some(&stats)).unwrap();
            assert_eq!(plain, with_stats);
            for mode in CorrectionMode::ablation_ladder() {
                let y = step(kind, x.view(), 5, e.view(), &s, z.view(), mode, Some(&stats)).unwrap();
                assert_eq!(plain, y, "{kind:?} {mode}");
            }
        }
    }

    #[test]
    fn missing_stats_or_calibration_is_an_error() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1, 1.0).unwrap();
        let x = arr2(&[[0.3, -1.2]]);
        let cnc = CorrectionMode {
            cnc: true,
            ..CorrectionMode::NONE
        };
        assert!(matches!(
            ddpm_step(x.view(), 3, x.view(), &s, x.view(), cnc, None),
            Err(Error::Uncalibrated(_))
        ));
        let vsc = CorrectionMode {
            vsc: true,
            ..CorrectionMode::NONE
        };
        let stats = CorrectionStats::zero(10, 2, 4);
        assert!(matches!(
            ddpm_step(x.view(), 3, x.view(), &s, x.view(), vsc, Some(&stats)),
            Err(Error::Uncalibrated(_))
        ));
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in CorrectionMode::ablation_ladder() {
            assert_eq!(m.to_string().parse::<CorrectionMode>().unwrap(), m);
        }
        assert_eq!(CorrectionMode::ALL.to_string(), "cnc+vsc+bc");
        assert!("cnc+foo".parse::<CorrectionMode>().is_err());
        assert!("cnc+cnc".parse::<CorrectionMode>().is_err());
    }

    proptest! {
        #[test]
        fn ddim_and_ddpm_means_agree_at_eta_one(
            steps in 3usize..200, t_frac in 0.0f64..1.0, x in -3.0f64..3.0, e in -3.0f64..3.0
        ) {
            let s = NoiseSchedule::linear(steps, 1e-4, 0.05, 1.0).unwrap();
            let t = 2 + ((steps - 2) as f64 * t_frac) as usize;
            let xa = arr2(&[[x]]);
            let ea = arr2(&[[e]]);
            let z = arr2(&[[0.0]]);
            let a = ddpm_step(xa.view(), t, ea.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
            let b = ddim_step(xa.view(), t, ea.view(), &s, z.view(), CorrectionMode::NONE, None).unwrap();
            prop_assert!((a[[0, 0]] - b[[0, 0]]).abs() < 1e-9);
        }
    }
}
