//! Uniform fake quantization and clipping-range calibration.
//!
//! A [`QuantConfig`] describes a uniform grid of `2^b` codes spanning a
//! clipping range `[l, u]`. Quantize-dequantize maps a real value onto that
//! grid and back:
//!
//! ```text
//! x̂ = Δ · (round(clip(x, l, u) / Δ + Z) − round(Z)),   Δ = (u − l) / (2^b − 1),   Z = −l / Δ
//! ```
//!
//! `round` is half-away-from-zero ([`f64::round`]). Non-integer zero points
//! are kept as-is, so the grid is `{Δ·(n − round(Z)) : n ∈ 0..2^b}`.

use ndarray::{ArrayBase, ArrayD, Axis, Data, Dimension, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Half-width used to widen a degenerate (zero-width) clipping range.
pub const DEGENERATE_RANGE_EPS: f64 = 1e-6;

/// Default activation percentile for distribution-based clipping.
pub const DEFAULT_ACTIVATION_PERCENTILE: f64 = 99.9;

/// A clipping range `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl ClipRange {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let r = ClipRange { low, high };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "clip range [{}, {}] is not finite",
                self.low, self.high
            )));
        }
        if self.low >= self.high {
            return Err(Error::InvalidConfig(format!(
                "clip range requires low < high, got [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "ranges")]
pub enum Granularity {
    PerTensor(ClipRange),
    /// One range per slice along axis 0 (output channel of a weight matrix).
    PerChannel(Vec<ClipRange>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub granularity: Granularity,
}

/// Grid parameters for one granularity group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub low: f64,
    pub high: f64,
    pub step: f64,
    pub zero_point: f64,
    pub levels: u32,
}

impl Grid {
    fn new(bits: u32, range: ClipRange) -> Self {
        let levels = (1u64 << bits) as f64 - 1.0;
        let step = (range.high - range.low) / levels;
        Grid {
            low: range.low,
            high: range.high,
            step,
            zero_point: -range.low / step,
            levels: (1u32 << bits) - 1,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let clipped = x.clamp(self.low, self.high);
        self.step * ((clipped / self.step + self.zero_point).round() - self.zero_point.round())
    }

    /// Smallest and largest representable values.
    pub fn bounds(&self) -> (f64, f64) {
        let rz = self.zero_point.round();
        (
            self.step * (0.0 - rz),
            self.step * (self.levels as f64 - rz),
        )
    }
}

impl QuantConfig {
    pub fn per_tensor(bits: u32, low: f64, high: f64) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            granularity: Granularity::PerTensor(ClipRange { low, high }),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn per_channel(bits: u32, ranges: Vec<ClipRange>) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            granularity: Granularity::PerChannel(ranges),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bitwidth {} outside {MIN_BITS}..={MAX_BITS}",
                self.bits
            )));
        }
        match &self.granularity {
            Granularity::PerTensor(r) => r.validate(),
            Granularity::PerChannel(rs) => {
                if rs.is_empty() {
                    return Err(Error::InvalidConfig(
                        "per-channel config has no channels".into(),
                    ));
                }
                rs.iter().try_for_each(ClipRange::validate)
            }
        }
    }

    /// Grids for every granularity group (one for per-tensor).
    pub fn grids(&self) -> Vec<Grid> {
        match &self.granularity {
            Granularity::PerTensor(r) => vec![Grid::new(self.bits, *r)],
            Granularity::PerChannel(rs) => rs.iter().map(|r| Grid::new(self.bits, *r)).collect(),
        }
    }

    /// Quantization step Δ of the first group.
    pub fn step(&self) -> f64 {
        self.grids()[0].step
    }

    pub fn zero_point(&self) -> f64 {
        self.grids()[0].zero_point
    }
}

/// Quantize-dequantize `x` under `cfg`. Per-channel configs index axis 0.
pub fn quantize_dequantize<S, D>(x: &ArrayBase<S, D>, cfg: &QuantConfig) -> Result<ArrayBase<ndarray::OwnedRepr<f64>, D>>
where
    S: Data<Elem = f64>,
    D: Dimension + RemoveAxis,
{
    let mut out = x.to_owned();
    quantize_dequantize_inplace(&mut out, cfg)?;
    Ok(out)
}

pub fn quantize_dequantize_inplace<D: Dimension + RemoveAxis>(
    x: &mut ArrayBase<ndarray::OwnedRepr<f64>, D>,
    cfg: &QuantConfig,
) -> Result<()> {
    cfg.validate()?;
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite element {bad} in quantizer input"
        )));
    }
    match &cfg.granularity {
        Granularity::PerTensor(r) => {
            let grid = Grid::new(cfg.bits, *r);
            x.mapv_inplace(|v| grid.apply(v));
        }
        Granularity::PerChannel(rs) => {
            if x.ndim() == 0 || x.len_of(Axis(0)) != rs.len() {
                return Err(Error::InvalidInput(format!(
                    "per-channel config has {} channels, tensor shape {:?}",
                    rs.len(),
                    x.shape()
                )));
            }
            for (mut lane, r) in x.axis_iter_mut(Axis(0)).zip(rs) {
                let grid = Grid::new(cfg.bits, *r);
                lane.mapv_inplace(|v| grid.apply(v));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "p")]
pub enum ClipMode {
    MinMax,
    /// Symmetric tail cut keeping the central `p` percent.
    Percentile(f64),
}

/// Calibrate a clipping range over `samples`.
///
/// Percentile mode uses the lower-rank convention: with the samples sorted
/// ascending and 1-based ranks, `u` is the value at rank `⌈n·p/100⌉` and
/// `l` the value at rank `⌈n·(100−p)/100⌉`. A zero-width result is widened
/// to `[v − 1e-6, v + 1e-6]`.
pub fn calibrate_clip_range(samples: &[f64], mode: ClipMode) -> Result<ClipRange> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty calibration sample set".into()));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite calibration sample {bad}"
        )));
    }
    let (low, high) = match mode {
        ClipMode::MinMax => samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
        ClipMode::Percentile(p) => {
            if !(p > 0.0 && p < 100.0) {
                return Err(Error::InvalidConfig(format!(
                    "percentile must lie in (0, 100), got {p}"
                )));
            }
            let n = samples.len();
            let mut buf = samples.to_vec();
            let hi_idx = lower_rank(n, p) - 1;
            let lo_idx = lower_rank(n, 100.0 - p) - 1;
            let (_, &mut hi, _) = buf.select_nth_unstable_by(hi_idx, f64::total_cmp);
            let (_, &mut lo, _) = buf.select_nth_unstable_by(lo_idx, f64::total_cmp);
            (lo, hi)
        }
    };
    if low >= high {
        let v = 0.5 * (low + high);
        return Ok(ClipRange {
            low: v - DEGENERATE_RANGE_EPS,
            high: v + DEGENERATE_RANGE_EPS,
        });
    }
    Ok(ClipRange { low, high })
}

/// 1-based rank `⌈n·q/100⌉`, clamped to `1..=n`. The small slack absorbs
/// representation error in `q` (e.g. `1000·99.9/100 = 999.0000000000001`).
fn lower_rank(n: usize, q: f64) -> usize {
    let r = (n as f64 * q / 100.0 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Per-channel minmax ranges over axis 0 of a weight tensor.
pub fn calibrate_per_channel(weights: &ArrayD<f64>) -> Result<Vec<ClipRange>> {
    if weights.ndim() == 0 {
        return Err(Error::InvalidInput("scalar weight tensor".into()));
    }
    weights
        .axis_iter(Axis(0))
        .map(|lane| {
            let v: Vec<f64> = lane.iter().copied().collect();
            calibrate_clip_range(&v, ClipMode::MinMax)
        })
        .collect()
}
