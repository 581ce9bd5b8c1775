//! Quantization-noise statistics and the three corrections built on them.
//!
//! The quantization noise of the noise predictor, `Δ = ε̂ − ε`, is split into
//! a part proportional to the full-precision output and a residual:
//! `Δ = k·ε + Δ'`. `k` is the OLS slope of `Δ` on `ε` (clamped at zero), and
//! `Δ'` is modelled as Gaussian with per-channel mean `μ_q` and scalar
//! variance `σ_q²`. From these:
//!
//! * correlated-noise correction divides `ε̂` by `1 + k`;
//! * bias correction subtracts `μ_q` first;
//! * variance-schedule calibration shrinks `σ_t` so that the residual noise
//!   plus the scheduled noise keeps the original per-step variance.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::rng;
use crate::sampler::{self, CorrectionMode, Denoiser, SamplerKind, TRAJECTORY_CHUNK};
use crate::schedule::NoiseSchedule;

/// Default number of teacher-forced trajectories for statistics collection.
pub const DEFAULT_STATS_SAMPLES: usize = 1024;

/// Minimum element count accepted by [`normality_test`].
pub const NORMALITY_MIN_COUNT: usize = 20;

/// Tolerance below which a negative `1 − ᾱ_{t−1} − σ_t²` is treated as
/// rounding error and clamped to zero.
pub(crate) const SCHEDULE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStats {
    /// Correlation coefficient per step (index `t − 1`), always `≥ 0`.
    pub k: Vec<f64>,
    /// Per-channel residual mean per step.
    pub mu_q: Vec<Vec<f64>>,
    /// Scalar residual variance per step.
    pub sigma_q2: Vec<f64>,
    pub n_samples: usize,
    pub normality_p: Vec<f64>,
}

impl CorrectionStats {
    /// Stats that make every correction an identity.
    pub fn zero(steps: usize, channels: usize, n_samples: usize) -> Self {
        CorrectionStats {
            k: vec![0.0; steps],
            mu_q: vec![vec![0.0; channels]; steps],
            sigma_q2: vec![0.0; steps],
            n_samples,
            normality_p: vec![1.0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.k.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.k.len();
        if self.mu_q.len() != t || self.sigma_q2.len() != t || self.normality_p.len() != t {
            return Err(Error::Validation("per-step stats arrays differ in length".into()));
        }
        if let Some(i) = self.k.iter().position(|k| !(*k >= 0.0) || !k.is_finite()) {
            return Err(Error::Validation(format!(
                "k at step {} is {} (must be finite and >= 0)",
                i + 1,
                self.k[i]
            )));
        }
        if let Some(i) = self.sigma_q2.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma_q2 at step {} is {} (must be finite and >= 0)",
                i + 1,
                self.sigma_q2[i]
            )));
        }
        if self.mu_q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite mu_q".into()));
        }
        if let Some(c) = self.mu_q.first().map(Vec::len) {
            if self.mu_q.iter().any(|m| m.len() != c) {
                return Err(Error::Validation("mu_q channel counts differ across steps".into()));
            }
        }
        if self.n_samples < 2 {
            return Err(Error::Validation(format!(
                "n_samples is {}, need at least 2",
                self.n_samples
            )));
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.k.len() {
            return Err(Error::Uncalibrated(format!(
                "no correction statistics for step {t} (have {})",
                self.k.len()
            )));
        }
        Ok(())
    }

    /// Assemble per-step stats by picking, at every step, the entry from
    /// the stats set selected by `choose(t)`.
    pub fn compose<'a>(steps: usize, choose: impl Fn(usize) -> Result<&'a CorrectionStats>) -> Result<Self> {
        let mut out = CorrectionStats {
            k: Vec::with_capacity(steps),
            mu_q: Vec::with_capacity(steps),
            sigma_q2: Vec::with_capacity(steps),
            n_samples: usize::MAX,
            normality_p: Vec::with_capacity(steps),
        };
        for t in 1..=steps {
            let src = choose(t)?;
            src.check_step(t)?;
            out.k.push(src.k[t - 1]);
            out.mu_q.push(src.mu_q[t - 1].clone());
            out.sigma_q2.push(src.sigma_q2[t - 1]);
            out.normality_p.push(src.normality_p[t - 1]);
            out.n_samples = out.n_samples.min(src.n_samples);
        }
        Ok(out)
    }
}

/// Pearson correlation of two equally sized sequences.
pub fn measure_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "correlation needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let m = Moments::of(a, b);
    if m.var_a <= 0.0 || m.var_b <= 0.0 {
        return Err(Error::DegenerateStatistics(
            "correlation of a zero-variance sequence".into(),
        ));
    }
    Ok((m.cov / (m.var_a.sqrt() * m.var_b.sqrt())).clamp(-1.0, 1.0))
}

/// Two-pass sample moments (population normalization).
struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl Moments {
    fn of(a: &[f64], b: &[f64]) -> Self {
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x - mean_a, y - mean_b);
            var_a += dx * dx;
            var_b += dy * dy;
            cov += dx * dy;
        }
        Moments {
            mean_a,
            mean_b,
            var_a: var_a / n,
            var_b: var_b / n,
            cov: cov / n,
        }
    }
}

/// OLS fit of `delta = slope·eps + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn fit_noise_regression(eps: ArrayView2<'_, f64>, delta: ArrayView2<'_, f64>) -> Result<LinearFit> {
    if eps.shape() != delta.shape() {
        return Err(Error::InvalidInput(format!(
            "paired sets differ in shape: {:?} vs {:?}",
            eps.shape(),
            delta.shape()
        )));
    }
    let (e, d) = (contiguous(eps), contiguous(delta));
    if e.is_empty() {
        return Err(Error::InvalidInput("empty noise sets".into()));
    }
    let m = Moments::of(&e, &d);
    if !(m.var_a > 0.0) {
        return Err(Error::DegenerateStatistics(
            "full-precision outputs have zero variance".into(),
        ));
    }
    let slope = m.cov / m.var_a;
    Ok(LinearFit {
        slope,
        intercept: m.mean_b - slope * m.mean_a,
    })
}

fn contiguous(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Correlation coefficient `k`: the OLS slope of `delta` on `eps` over all
/// elements, clamped at zero.
pub fn estimate_k(eps: ArrayView2<'_, f64>, delta: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(fit_noise_regression(eps, delta)?.slope.max(0.0))
}

/// Kolmogorov–Smirnov test against a normal distribution fitted by the
/// sample mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn normality_test(residuals: &[f64]) -> Result<NormalityResult> {
    let n = residuals.len();
    if n < NORMALITY_MIN_COUNT {
        return Err(Error::InvalidInput(format!(
            "normality test needs at least {NORMALITY_MIN_COUNT} values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = residuals.iter().sum::<f64>() / nf;
    let var = residuals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateStatistics("constant residuals".into()));
    }
    let sd = var.sqrt();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal_cdf((x - mean) / sd);
            let lo = cdf - i as f64 / nf;
            let hi = (i + 1) as f64 / nf - cdf;
            lo.max(hi)
        })
        .fold(0.0, f64::max);
    Ok(NormalityResult {
        statistic,
        p_value: kolmogorov_p(statistic, n),
    })
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov tail probability with Stephens' small-sample
/// adjustment `λ = (√n + 0.12 + 0.11/√n)·D`.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `(ε̂ − μ_q[t]) / (1 + k[t])`, with each term enabled by its flag.
pub fn apply_corrections(
    eps_hat: ArrayView2<'_, f64>,
    t: usize,
    stats: &CorrectionStats,
    cnc: bool,
    bc: bool,
) -> Result<Array2<f64>> {
    stats.check_step(t)?;
    let mut out = eps_hat.to_owned();
    if bc {
        let mu = &stats.mu_q[t - 1];
        if mu.len() != out.ncols() {
            return Err(Error::InvalidInput(format!(
                "bias correction has {} channels, output has {}",
                mu.len(),
                out.ncols()
            )));
        }
        for mut row in out.rows_mut() {
            row.iter_mut().zip(mu).for_each(|(v, m)| *v -= m);
        }
    }
    if cnc {
        let scale = 1.0 + stats.k[t - 1];
        out.mapv_inplace(|v| v / scale);
    }
    Ok(out)
}

/// Full correction: `(ε̂ − μ_q[t]) / (1 + k[t])`.
pub fn correct_epsilon(eps_hat: ArrayView2<'_, f64>, t: usize, stats: &CorrectionStats) -> Result<Array2<f64>> {
    apply_corrections(eps_hat, t, stats, true, true)
}

/// Calibrated variance for one DDPM step:
/// `σ'² = max(σ² − β²·σ_q² / (α(1−ᾱ)(1+k)²), 0)`.
pub fn calibrated_variance_ddpm(beta: f64, alpha: f64, alpha_bar: f64, k: f64, sigma2: f64, sigma_q2: f64) -> f64 {
    let excess = beta * beta * sigma_q2 / (alpha * (1.0 - alpha_bar) * (1.0 + k).powi(2));
    if sigma2 >= excess {
        sigma2 - excess
    } else {
        0.0
    }
}

/// Coefficient of the residual noise in a corrected DDIM step:
/// `λ = √ᾱ_{t−1}·√(1−ᾱ_t)/√ᾱ_t + √(1 − ᾱ_{t−1} − σ²)`.
pub fn ddim_lambda(alpha_bar_prev: f64, alpha_bar: f64, sigma2: f64) -> Result<f64> {
    let rest = 1.0 - alpha_bar_prev - sigma2;
    if rest < -SCHEDULE_SLACK {
        return Err(Error::InvalidSchedule(format!(
            "1 - alpha_bar_prev - sigma^2 = {rest} < 0"
        )));
    }
    Ok(alpha_bar_prev.sqrt() * (1.0 - alpha_bar).sqrt() / alpha_bar.sqrt() + rest.max(0.0).sqrt())
}

/// Calibrated variance for one DDIM step:
/// `σ'² = max(σ² − λ²·σ_q² / (1+k)², 0)`; the `(1+k)²` divisor is dropped
/// when `k_factor` is false.
pub fn calibrated_variance_ddim(
    alpha_bar_prev: f64,
    alpha_bar: f64,
    k: f64,
    sigma2: f64,
    sigma_q2: f64,
    k_factor: bool,
) -> Result<f64> {
    let lambda = ddim_lambda(alpha_bar_prev, alpha_bar, sigma2)?;
    let div = if k_factor { (1.0 + k).powi(2) } else { 1.0 };
    let excess = lambda * lambda * sigma_q2 / div;
    Ok(if sigma2 >= excess { sigma2 - excess } else { 0.0 })
}

/// Result of variance-schedule calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSigma {
    /// Calibrated standard deviation σ'_t per step.
    pub sigma: Vec<f64>,
    /// Steps where the residual variance exceeded σ_t² and σ' was clamped to 0.
    pub clamped_steps: Vec<usize>,
    /// False when the sampler is deterministic (every σ_t = 0), in which case
    /// calibration cannot absorb anything.
    pub vsc_available: bool,
}

impl CalibratedSigma {
    fn from_variances(sched: &NoiseSchedule, var: Vec<f64>, stats: &CorrectionStats) -> Self {
        let clamped_steps = var
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v == 0.0 && stats.sigma_q2[i] > 0.0 && sched.sigma[i] > 0.0)
            .map(|(i, _)| i + 1)
            .collect();
        CalibratedSigma {
            // σ' ≤ σ must hold exactly, so never let sqrt rounding exceed it.
            sigma: var
                .iter()
                .zip(&sched.sigma)
                .map(|(v, s)| v.sqrt().min(*s))
                .collect(),
            clamped_steps,
            vsc_available: sched.sigma.iter().any(|&s| s > 0.0),
        }
    }
}

fn check_lengths(sched: &NoiseSchedule, stats: &CorrectionStats) -> Result<()> {
    stats.validate()?;
    if stats.steps() != sched.steps {
        return Err(Error::InvalidInput(format!(
            "stats cover {} steps, schedule has {}",
            stats.steps(),
            sched.steps
        )));
    }
    Ok(())
}

pub fn calibrate_variance_ddpm(sched: &NoiseSchedule, stats: &CorrectionStats) -> Result<CalibratedSigma> {
    check_lengths(sched, stats)?;
    let var = (1..=sched.steps)
        .map(|t| {
            calibrated_variance_ddpm(
                sched.beta(t),
                sched.alpha(t),
                sched.alpha_bar(t),
                stats.k[t - 1],
                sched.sigma(t).powi(2),
                stats.sigma_q2[t - 1],
            )
        })
        .collect();
    Ok(CalibratedSigma::from_variances(sched, var, stats))
}

pub fn calibrate_variance_ddim(
    sched: &NoiseSchedule,
    stats: &CorrectionStats,
    k_factor: bool,
) -> Result<CalibratedSigma> {
    check_lengths(sched, stats)?;
    let var = (1..=sched.steps)
        .map(|t| {
            calibrated_variance_ddim(
                sched.alpha_bar_prev(t),
                sched.alpha_bar(t),
                stats.k[t - 1],
                sched.sigma(t).powi(2),
                stats.sigma_q2[t - 1],
                k_factor,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedSigma::from_variances(sched, var, stats))
}

/// Per-step full-precision outputs and quantization noise collected on
/// shared states. Entry `t − 1` holds `n × dim` arrays for step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrace {
    pub eps: Vec<Array2<f64>>,
    pub delta: Vec<Array2<f64>>,
}

/// Run `n` full-precision trajectories and, at every step, evaluate both the
/// full-precision and the quantized predictor on the same state.
///
/// Trajectory `i` draws from `rng::stream(seed, i)`; work is split into
/// fixed-size chunks so results do not depend on the worker count.
pub fn collect_noise_trace(
    fp: &dyn EpsModel,
    quant: &Denoiser<'_>,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<NoiseTrace> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "statistics need at least 2 trajectories, got {n}"
        )));
    }
    let dim = quant.data_dim();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(TRAJECTORY_CHUNK)
        .map(|start| (start, (start + TRAJECTORY_CHUNK).min(n)))
        .collect();
    let per_chunk = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut streams: Vec<_> = (start..end).map(|i| rng::stream(seed, i as u64)).collect();
            let mut x = sampler::draw_prior(&mut streams, dim);
            let mut eps_steps = Vec::with_capacity(sched.steps);
            let mut delta_steps = Vec::with_capacity(sched.steps);
            for t in (1..=sched.steps).rev() {
                let eps = fp.predict(x.view(), t)?;
                let eps_q = quant.model(t)?.predict(x.view(), t)?;
                let z = sampler::draw_step_noise(&mut streams, dim, t);
                x = sampler::step(kind, x.view(), t, eps.view(), sched, z.view(), CorrectionMode::NONE, None)?;
                delta_steps.push(&eps_q - &eps);
                eps_steps.push(eps);
            }
            eps_steps.reverse();
            delta_steps.reverse();
            Ok((eps_steps, delta_steps))
        })
        .collect::<Result<Vec<_>>>()?;
    let gather = |pick: fn(&(Vec<Array2<f64>>, Vec<Array2<f64>>)) -> &Vec<Array2<f64>>| {
        (0..sched.steps)
            .map(|i| {
                let views: Vec<_> = per_chunk.iter().map(|c| pick(c)[i].view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("chunks share width")
            })
            .collect::<Vec<_>>()
    };
    Ok(NoiseTrace {
        eps: gather(|c| &c.0),
        delta: gather(|c| &c.1),
    })
}

/// Per-step statistics from a collected trace.
pub fn stats_from_trace(trace: &NoiseTrace) -> Result<CorrectionStats> {
    let steps = trace.eps.len();
    let n_samples = trace.eps.first().map_or(0, |e| e.nrows());
    let mut stats = CorrectionStats {
        k: Vec::with_capacity(steps),
        mu_q: Vec::with_capacity(steps),
        sigma_q2: Vec::with_capacity(steps),
        n_samples,
        normality_p: Vec::with_capacity(steps),
    };
    for (eps, delta) in trace.eps.iter().zip(&trace.delta) {
        let (k, mu, var, p) = step_stats(eps.view(), delta.view())?;
        stats.k.push(k);
        stats.mu_q.push(mu);
        stats.sigma_q2.push(var);
        stats.normality_p.push(p);
    }
    stats.validate()?;
    Ok(stats)
}

/// `(k, μ_q, σ_q², normality p)` for one step.
fn step_stats(eps: ArrayView2<'_, f64>, delta: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>, f64, f64)> {
    if delta.iter().all(|&d| d == 0.0) {
        return Ok((0.0, vec![0.0; delta.ncols()], 0.0, 1.0));
    }
    let k = estimate_k(eps, delta)?;
    let residual = &delta - &(&eps * k);
    let mu = residual
        .mean_axis(Axis(0))
        .expect("non-empty")
        .to_vec();
    let flat: Vec<f64> = residual.iter().copied().collect();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let p = match normality_test(&flat) {
        Ok(r) => r.p_value,
        Err(Error::DegenerateStatistics(_)) | Err(Error::InvalidInput(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((k, mu, var, if p.is_nan() { 1.0 } else { p }))
}

/// Teacher-forced statistics collection (see [`collect_noise_trace`]).
pub fn collect_noise_stats(
    fp: &dyn EpsModel,
    quant: &Denoiser<'_>,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<CorrectionStats> {
    stats_from_trace(&collect_noise_trace(fp, quant, sched, kind, n, seed)?)
}
