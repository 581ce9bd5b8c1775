//! Noise-prediction MLP with layer normalization.
//!
//! The network maps `(x_t, t)` to a prediction of the injected noise. The
//! input point is concatenated with a learned per-step embedding, passed
//! through `affine → layer-norm → SiLU` hidden blocks, and projected back to
//! the data dimension by a final affine layer. Gradients for training are
//! derived by hand for this fixed architecture.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    calibrate_clip_range, calibrate_per_channel, quantize_dequantize, quantize_dequantize_inplace,
    ClipMode, QuantConfig,
};
use crate::schedule::NoiseSchedule;

/// Variance floor inside layer normalization.
pub const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub emb_dim: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
}

impl Arch {
    pub fn toy(steps: usize) -> Self {
        Arch {
            input_dim: 2,
            emb_dim: 16,
            hidden: vec![128, 128, 128],
            steps,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim + self.emb_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    /// Multiply-accumulate count of each affine layer for one sample.
    pub fn layer_macs(&self) -> Vec<u64> {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| (i * o) as u64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<LayerNorm>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    pub arch: Arch,
    /// `steps × emb_dim`; row `t − 1` embeds step `t`.
    pub time_embedding: Array2<f64>,
    pub layers: Vec<Layer>,
}

/// Normalize each row to zero mean and unit variance. Returns the normalized
/// rows and the per-row standard deviations used.
pub fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = z.ncols() as f64;
    let mut out = z.clone();
    let mut stds = Array1::zeros(z.nrows());
    for (mut row, sd) in out.rows_mut().into_iter().zip(stds.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / s);
        *sd = s;
    }
    (out, stds)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    #[inline]
    fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Silu => y * sigmoid(y),
            Activation::Identity => y,
        }
    }

    #[inline]
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(y);
                s * (1.0 + y * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Anything that predicts noise for a batch of states at a single step.
pub trait EpsModel: Sync {
    fn predict(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>>;
}

struct LayerCache {
    input: Array2<f64>,
    normalized: Option<Array2<f64>>,
    stds: Option<Array1<f64>>,
    pre_activation: Array2<f64>,
}

impl NoisePredictor {
    /// Randomly initialized network (uniform `±1/√fan_in` affine weights,
    /// standard-normal time embedding, identity normalization affine).
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        if arch.hidden.is_empty() || arch.input_dim == 0 || arch.steps == 0 {
            return Err(Error::InvalidConfig(
                "network needs at least one hidden layer, a data dimension and a step count".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let time_embedding = Array2::from_shape_fn((arch.steps, arch.emb_dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                let hidden = i != last;
                Layer {
                    weight,
                    bias,
                    norm: hidden.then(|| LayerNorm {
                        gamma: Array1::ones(fan_out),
                        beta: Array1::zeros(fan_out),
                    }),
                    activation: if hidden {
                        Activation::Silu
                    } else {
                        Activation::Identity
                    },
                }
            })
            .collect();
        let net = NoisePredictor {
            arch,
            time_embedding,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.arch.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Validation(format!(
                "architecture lists {} layers, network has {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, &(fan_in, fan_out))) in self.layers.iter().zip(&dims).enumerate() {
            let norm_ok = layer
                .norm
                .as_ref()
                .is_none_or(|n| n.gamma.len() == fan_out && n.beta.len() == fan_out);
            if layer.weight.dim() != (fan_out, fan_in) || layer.bias.len() != fan_out || !norm_ok {
                return Err(Error::Validation(format!("layer {i} has inconsistent shapes")));
            }
        }
        if !self.layers.iter().any(|l| l.norm.is_some()) {
            return Err(Error::Validation("network has no normalization layer".into()));
        }
        if self.time_embedding.dim() != (self.arch.steps, self.arch.emb_dim) {
            return Err(Error::Validation("time embedding shape mismatch".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::InvalidInput(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        if ts.len() != x.nrows() {
            return Err(Error::InvalidInput("one step per row required".into()));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.arch.steps) {
            return Err(Error::InvalidStep {
                t,
                steps: self.arch.steps,
            });
        }
        Ok(())
    }

    fn embed_input(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Array2<f64> {
        let emb = self.time_embedding.select(Axis(0), &ts.iter().map(|t| t - 1).collect::<Vec<_>>());
        concatenate(Axis(1), &[x, emb.view()]).expect("row counts match")
    }

    fn layer_forward(
        layer: &Layer,
        weight: &Array2<f64>,
        input: Array2<f64>,
        keep: bool,
    ) -> (Array2<f64>, Option<LayerCache>) {
        let mut z = input.dot(&weight.t());
        z += &layer.bias;
        let (y, normalized, stds) = match &layer.norm {
            Some(norm) => {
                let (n, stds) = normalize_rows(&z);
                let mut y = &n * &norm.gamma;
                y += &norm.beta;
                (y, Some(n), Some(stds))
            }
            None => (z, None, None),
        };
        let act = layer.activation;
        let out = y.mapv(|v| act.apply(v));
        let cache = keep.then(|| LayerCache {
            input,
            normalized,
            stds,
            pre_activation: y,
        });
        (out, cache)
    }

    /// Full-precision forward with per-row steps.
    pub fn forward(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check_input(x, ts)?;
        let mut h = self.embed_input(x, ts);
        for layer in &self.layers {
            h = Self::layer_forward(layer, &layer.weight, h, false).0;
        }
        Ok(h)
    }

    /// Input tensor seen by each affine layer, in full precision.
    pub fn layer_inputs(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Vec<Array2<f64>>> {
        let ts = vec![t; x.nrows()];
        self.check_input(x, &ts)?;
        let mut h = self.embed_input(x, &ts);
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            inputs.push(h.clone());
            h = Self::layer_forward(layer, &layer.weight, h, false).0;
        }
        Ok(inputs)
    }

    /// Mean squared error against `target` and its gradient with respect to
    /// every parameter, returned as a network-shaped container.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        ts: &[usize],
        target: ArrayView2<'_, f64>,
    ) -> Result<(f64, NoisePredictor)> {
        self.check_input(x, ts)?;
        let mut h = self.embed_input(x, ts);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = Self::layer_forward(layer, &layer.weight, h, true);
            caches.push(cache.expect("cache requested"));
            h = out;
        }
        let count = h.len() as f64;
        let diff = &h - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut grad = self.zeros_like();
        let mut upstream = diff.mapv(|d| 2.0 * d / count);
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let act = layer.activation;
            let mut dy = upstream;
            dy.zip_mut_with(&cache.pre_activation, |g, &y| *g *= act.derivative(y));
            let dz = match (&layer.norm, cache.normalized, cache.stds) {
                (Some(norm), Some(n), Some(stds)) => {
                    let g = &mut grad.layers[i];
                    let gn = g.norm.as_mut().expect("mirrors network");
                    gn.gamma.assign(&(&dy * &n).sum_axis(Axis(0)));
                    gn.beta.assign(&dy.sum_axis(Axis(0)));
                    let dn = &dy * &norm.gamma;
                    layer_norm_backward(&dn, &n, &stds)
                }
                _ => dy,
            };
            grad.layers[i].weight.assign(&dz.t().dot(&cache.input));
            grad.layers[i].bias.assign(&dz.sum_axis(Axis(0)));
            upstream = dz.dot(&layer.weight);
        }
        let d = self.arch.input_dim;
        for (row, &t) in upstream.slice(s![.., d..]).rows().into_iter().zip(ts) {
            let mut e = grad.time_embedding.row_mut(t - 1);
            e += &row;
        }
        Ok((loss, grad))
    }

    pub fn zeros_like(&self) -> NoisePredictor {
        NoisePredictor {
            arch: self.arch.clone(),
            time_embedding: Array2::zeros(self.time_embedding.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                    norm: l.norm.as_ref().map(|n| LayerNorm {
                        gamma: Array1::zeros(n.gamma.raw_dim()),
                        beta: Array1::zeros(n.beta.raw_dim()),
                    }),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![self.time_embedding.as_slice().expect("standard layout")];
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let Some(n) = &l.norm {
                out.push(n.gamma.as_slice().expect("standard layout"));
                out.push(n.beta.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.time_embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(n) = &mut l.norm {
                out.push(n.gamma.as_slice_mut().expect("standard layout"));
                out.push(n.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Bind a quantization assignment, pre-quantizing the weights.
    pub fn quantized<'a>(&'a self, assign: &LayerQuantAssignment) -> Result<QuantizedPredictor<'a>> {
        QuantizedPredictor::new(self, assign)
    }
}

/// Backward pass through `n = (z − mean) / s` for each row.
fn layer_norm_backward(dn: &Array2<f64>, n: &Array2<f64>, stds: &Array1<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let mut dz = dn.clone();
    for ((mut row, nrow), &s) in dz.rows_mut().into_iter().zip(n.rows()).zip(stds) {
        let mean_dn = row.sum() / d;
        let mean_dn_n = row.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d;
        row.zip_mut_with(&nrow, |g, &nv| *g = (*g - mean_dn - nv * mean_dn_n) / s);
    }
    dz
}

impl EpsModel for NoisePredictor {
    fn predict(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        self.forward(x, &vec![t; x.nrows()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum ActivationQuant {
    FullPrecision,
    /// Bitwidth chosen, clipping range not yet calibrated.
    Pending { bits: u32 },
    Calibrated { config: QuantConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    /// `None` keeps the weights in full precision.
    pub weight: Option<QuantConfig>,
    /// Quantizer applied to the layer's input activations.
    pub activation: ActivationQuant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantAssignment {
    pub layers: Vec<LayerQuant>,
}

impl LayerQuantAssignment {
    pub fn full_precision(net: &NoisePredictor) -> Self {
        LayerQuantAssignment {
            layers: net
                .layers
                .iter()
                .map(|_| LayerQuant {
                    weight: None,
                    activation: ActivationQuant::FullPrecision,
                })
                .collect(),
        }
    }

    /// Per-channel minmax weights at `weight_bits` and per-tensor activations
    /// at `act_bits` (pending calibration). First and last layers use
    /// `io_bits` for both operands.
    pub fn uniform(net: &NoisePredictor, weight_bits: u32, act_bits: u32, io_bits: u32) -> Result<Self> {
        Self::with_bits(net, Some(weight_bits), Some(act_bits), io_bits)
    }

    /// As [`uniform`](Self::uniform), with `None` keeping that operand of
    /// the interior layers in full precision. When both are `None` the whole
    /// network stays in full precision, including the first and last layers.
    pub fn with_bits(net: &NoisePredictor, weight_bits: Option<u32>, act_bits: Option<u32>, io_bits: u32) -> Result<Self> {
        if weight_bits.is_none() && act_bits.is_none() {
            return Ok(Self::full_precision(net));
        }
        let last = net.layers.len() - 1;
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let (wb, ab) = if i == 0 || i == last {
                    (Some(io_bits), Some(io_bits))
                } else {
                    (weight_bits, act_bits)
                };
                let weight = match wb {
                    Some(b) => {
                        let ranges = calibrate_per_channel(&layer.weight.clone().into_dyn())?;
                        Some(QuantConfig::per_channel(b, ranges)?)
                    }
                    None => None,
                };
                Ok(LayerQuant {
                    weight,
                    activation: ab.map_or(ActivationQuant::FullPrecision, |bits| ActivationQuant::Pending { bits }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerQuantAssignment { layers })
    }

    /// Activation bitwidth of the interior layers, if they share one.
    pub fn interior_activation_bits(&self) -> Option<u32> {
        let n = self.layers.len();
        let bits: Vec<u32> = self.layers[1..n.saturating_sub(1)]
            .iter()
            .filter_map(|l| match &l.activation {
                ActivationQuant::FullPrecision => None,
                ActivationQuant::Pending { bits } => Some(*bits),
                ActivationQuant::Calibrated { config } => Some(config.bits),
            })
            .collect();
        bits.first().copied().filter(|b| bits.iter().all(|x| x == b))
    }

    /// Fix every pending activation range from recorded layer inputs.
    pub fn calibrate_activations(&mut self, recorded: &[Vec<f64>], mode: ClipMode) -> Result<()> {
        if recorded.len() != self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} recorded activation sets for {} layers",
                recorded.len(),
                self.layers.len()
            )));
        }
        for (layer, samples) in self.layers.iter_mut().zip(recorded) {
            if let ActivationQuant::Pending { bits } = layer.activation {
                let range = calibrate_clip_range(samples, mode)?;
                layer.activation = ActivationQuant::Calibrated {
                    config: QuantConfig::per_tensor(bits, range.low, range.high)?,
                };
            }
        }
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l.activation, ActivationQuant::Pending { .. }))
    }
}

/// A network bound to a quantization assignment, with weights already
/// passed through their quantizers.
pub struct QuantizedPredictor<'a> {
    net: &'a NoisePredictor,
    weights: Vec<Option<Array2<f64>>>,
    activations: Vec<Option<QuantConfig>>,
}

impl<'a> QuantizedPredictor<'a> {
    fn new(net: &'a NoisePredictor, assign: &LayerQuantAssignment) -> Result<Self> {
        if assign.layers.len() != net.layers.len() {
            return Err(Error::InvalidInput(format!(
                "assignment covers {} layers, network has {}",
                assign.layers.len(),
                net.layers.len()
            )));
        }
        let mut weights = Vec::with_capacity(net.layers.len());
        let mut activations = Vec::with_capacity(net.layers.len());
        for (i, (layer, q)) in net.layers.iter().zip(&assign.layers).enumerate() {
            weights.push(
                q.weight
                    .as_ref()
                    .map(|cfg| quantize_dequantize(&layer.weight, cfg))
                    .transpose()?,
            );
            activations.push(match &q.activation {
                ActivationQuant::FullPrecision => None,
                ActivationQuant::Pending { bits } => {
                    return Err(Error::Uncalibrated(format!(
                        "layer {i} activations ({bits}-bit) have no clipping range"
                    )))
                }
                ActivationQuant::Calibrated { config } => Some(config.clone()),
            });
        }
        Ok(QuantizedPredictor {
            net,
            weights,
            activations,
        })
    }
}

impl EpsModel for QuantizedPredictor<'_> {
    fn predict(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        let ts = vec![t; x.nrows()];
        self.net.check_input(x, &ts)?;
        let mut h = self.net.embed_input(x, &ts);
        for ((layer, w), a) in self.net.layers.iter().zip(&self.weights).zip(&self.activations) {
            if let Some(cfg) = a {
                quantize_dequantize_inplace(&mut h, cfg)?;
            }
            let w = w.as_ref().unwrap_or(&layer.weight);
            h = NoisePredictor::layer_forward(layer, w, h, false).0;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
    /// Cosine-anneal the learning rate down to `lr * lr_floor`.
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f64,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr_floor() -> f64 {
    1.0
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
}

/// Train a freshly initialized network on `data` with the denoising
/// objective `E‖ε − ε_θ(x_t, t)‖²`, SGD with momentum.
pub fn train_toy(
    data: &Array2<f64>,
    sched: &NoiseSchedule,
    arch: Arch,
    cfg: &TrainConfig,
) -> Result<(NoisePredictor, TrainSummary)> {
    if data.nrows() == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidConfig(
            "batch_size must be positive, lr > 0 and momentum in [0, 1)".into(),
        ));
    }
    if arch.steps != sched.steps || arch.input_dim != data.ncols() {
        return Err(Error::InvalidConfig(
            "architecture does not match schedule length or data dimension".into(),
        ));
    }
    let mut net = NoisePredictor::init(arch, cfg.seed)?;
    let mut velocity = net.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let batches_per_epoch = data.nrows().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches_per_epoch).max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = data.select(Axis(0), chunk);
            let ts: Vec<usize> = chunk
                .iter()
                .map(|_| rng.random_range(1..=sched.steps))
                .collect();
            let z = Array2::from_shape_fn(x0.raw_dim(), |_| StandardNormal.sample(&mut rng));
            let mut xt = x0.clone();
            for ((mut row, zr), &t) in xt.rows_mut().into_iter().zip(z.rows()).zip(&ts) {
                let ab = sched.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                row.zip_mut_with(&zr, |x, &e| *x = a * *x + b * e);
            }
            let (loss, grad) = net.loss_and_grad(xt.view(), &ts, z.view())?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    iteration,
                    loss,
                });
            }
            epoch_loss += loss * chunk.len() as f64;

            let progress = iteration as f64 / total as f64;
            let lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + (PI * progress).cos()));
            let scale = if cfg.grad_clip > 0.0 {
                let norm = grad
                    .params()
                    .iter()
                    .flat_map(|p| p.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip {
                    cfg.grad_clip / norm
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for ((p, g), v) in net
                .params_mut()
                .into_iter()
                .zip(grad.params())
                .zip(velocity.params_mut())
            {
                for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = cfg.momentum * *v + scale * g;
                    *p -= lr * *v;
                }
            }
            iteration += 1;
        }
        epoch_losses.push(epoch_loss / data.nrows() as f64);
    }
    Ok((net, TrainSummary { epoch_losses }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gmm2d,
}

pub const GMM_COMPONENTS: usize = 8;
pub const GMM_RADIUS: f64 = 2.0;
pub const GMM_STD: f64 = 0.1;

/// Mixture centers, evenly spaced on the circle of radius 2.
pub fn gmm_centers() -> Array2<f64> {
    Array2::from_shape_fn((GMM_COMPONENTS, 2), |(k, d)| {
        let angle = 2.0 * PI * k as f64 / GMM_COMPONENTS as f64;
        GMM_RADIUS * if d == 0 { angle.cos() } else { angle.sin() }
    })
}

/// Draw `n` points from the toy dataset.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be at least 1".into()));
    }
    match kind {
        DatasetKind::Gmm2d => {
            let centers = gmm_centers();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Array2::zeros((n, 2));
            // Components are assigned in a shuffled round-robin so every
            // mode holds n/8 points up to one.
            let offset = rng.random_range(0..GMM_COMPONENTS);
            let mut labels: Vec<usize> = (0..n).map(|i| (i + offset) % GMM_COMPONENTS).collect();
            labels.shuffle(&mut rng);
            for (mut row, &k) in out.rows_mut().into_iter().zip(&labels) {
                for d in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    row[d] = centers[[k, d]] + GMM_STD * e;
                }
            }
            Ok(out)
        }
    }
}

/// Index of the nearest mixture center for every row.
pub fn assign_modes(points: &Array2<f64>) -> Vec<usize> {
    let centers = gmm_centers();
    points
        .rows()
        .into_iter()
        .map(|p| {
            (0..GMM_COMPONENTS)
                .min_by(|&a, &b| {
                    let da = (&p - &centers.row(a)).mapv(|v| v * v).sum();
                    let db = (&p - &centers.row(b)).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .expect("non-empty")
        })
        .collect()
}
