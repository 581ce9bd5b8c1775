//! Experiment configuration, read from TOML.
//!
//! Every section and key has a default, so an empty file is the toy
//! experiment. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixedprec::{DEFAULT_BIT_SET, DEFAULT_IO_BITS, DEFAULT_WEIGHT_BITS};
use crate::model::{Arch, DatasetKind, TrainConfig};
use crate::quant::{ClipMode, MAX_BITS, MIN_BITS};
use crate::sampler::{CorrectionMode, SamplerKind};
use crate::schedule::{NoiseSchedule, SnrForwardKind};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: SeedConfig,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub correction: CorrectionSection,
    pub stats: StatsSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

/// Named seeds. Each random process draws from exactly one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub data_seed: u64,
    pub heldout_seed: u64,
    pub train_seed: u64,
    pub calibration_seed: u64,
    pub stats_seed: u64,
    pub sample_seed: u64,
    pub metric_seed: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            data_seed: 1,
            heldout_seed: 2,
            train_seed: 0,
            calibration_seed: 3,
            stats_seed: 4,
            sample_seed: 100,
            metric_seed: 9,
        }
    }
}

impl SeedConfig {
    /// Replace every seed with `base + i`, `i` being the seed's position in
    /// the section, so distinct roles keep distinct streams.
    pub fn override_all(&mut self, base: u64) {
        let seeds = [
            &mut self.data_seed,
            &mut self.heldout_seed,
            &mut self.train_seed,
            &mut self.calibration_seed,
            &mut self.stats_seed,
            &mut self.sample_seed,
            &mut self.metric_seed,
        ];
        for (i, s) in seeds.into_iter().enumerate() {
            *s = base.wrapping_add(i as u64);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Gmm2d,
            n_train: 8192,
            n_heldout: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
    pub snr_forward: SnrForwardKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.15,
            eta: 1.0,
            snr_forward: SnrForwardKind::Cumulative,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden: Vec<usize>,
    /// Load this checkpoint instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let toy = Arch::toy(1);
        ModelConfig {
            emb_dim: toy.emb_dim,
            hidden: toy.hidden,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub lr_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 1.0,
            lr_floor: 0.01,
        }
    }
}

/// A bitwidth, or full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Precision {
    Bits(u32),
    Keyword(PrecisionKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionKeyword {
    /// Full precision.
    Fp,
    /// Per-step choice from the bit set (activations only).
    Mixed,
}

impl Precision {
    pub const FP: Precision = Precision::Keyword(PrecisionKeyword::Fp);
    pub const MIXED: Precision = Precision::Keyword(PrecisionKeyword::Mixed);

    pub fn bits(self) -> Option<u32> {
        match self {
            Precision::Bits(b) => Some(b),
            Precision::Keyword(_) => None,
        }
    }

    pub fn is_mixed(self) -> bool {
        self == Precision::MIXED
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub weight_bits: Precision,
    pub activation_bits: Precision,
    pub bit_set: Vec<u32>,
    pub io_bits: u32,
    pub activation_clip: ClipMode,
    /// Full-precision trajectories recorded to fix activation ranges.
    pub calibration_passes: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            weight_bits: Precision::Bits(DEFAULT_WEIGHT_BITS),
            activation_bits: Precision::Bits(4),
            bit_set: DEFAULT_BIT_SET.to_vec(),
            io_bits: DEFAULT_IO_BITS,
            activation_clip: ClipMode::MinMax,
            calibration_passes: 256,
        }
    }
}

impl QuantSection {
    pub fn is_full_precision(&self) -> bool {
        self.weight_bits == Precision::FP && self.activation_bits == Precision::FP
    }

    /// Activation bitwidths that need a calibrated model, ascending. `None`
    /// stands for full-precision activations.
    pub fn activation_variants(&self) -> Vec<Option<u32>> {
        match self.activation_bits {
            Precision::Bits(b) => vec![Some(b)],
            p if p.is_mixed() => self.bit_set.iter().map(|&b| Some(b)).collect(),
            _ => vec![None],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionSection {
    /// Correction modes sampled and evaluated, in order.
    pub modes: Vec<CorrectionMode>,
    /// Divide the DDIM variance reduction by `(1 + k)²`.
    pub ddim_k_factor: bool,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        CorrectionSection {
            modes: CorrectionMode::ablation_ladder().to_vec(),
            ddim_k_factor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub n_samples: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            n_samples: crate::correction::DEFAULT_STATS_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub n_eval: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddpm,
            n_eval: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_projections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_projections: crate::metrics::DEFAULT_PROJECTIONS,
        }
    }
}

fn check_bits(what: &str, b: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&b) {
        return Err(Error::InvalidConfig(format!(
            "{what} = {b} is outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            Error::InvalidConfig(match e.span() {
                Some(span) => format!("{} (at byte {})", e.message(), span.start),
                None => e.message().to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: 2,
            emb_dim: self.model.emb_dim,
            hidden: self.model.hidden.clone(),
            steps: self.schedule.steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            grad_clip: self.train.grad_clip,
            lr_floor: self.train.lr_floor,
            seed: self.seeds.train_seed,
        }
    }

    pub fn needs_stats(&self) -> bool {
        self.correction.modes.iter().any(|m| m.needs_stats())
    }

    pub fn needs_vsc(&self) -> bool {
        self.correction.modes.iter().any(|m| m.vsc)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        if self.schedule.eta == 0.0 && self.needs_vsc() {
            return Err(Error::InvalidConfig(
                "variance schedule calibration is unavailable at eta = 0: there is no sampling \
                 noise to shrink; drop vsc from correction.modes or use eta > 0"
                    .into(),
            ));
        }
        if self.dataset.n_train == 0 || self.dataset.n_heldout == 0 {
            return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) || self.model.emb_dim == 0 {
            return Err(Error::InvalidConfig(
                "model needs at least one hidden layer and positive widths".into(),
            ));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::InvalidConfig(
                "train.batch_size must be positive, train.lr > 0 and train.momentum in [0, 1)".into(),
            ));
        }
        if !(self.train.grad_clip >= 0.0) || !(0.0..=1.0).contains(&self.train.lr_floor) {
            return Err(Error::InvalidConfig(
                "train.grad_clip must be >= 0 and train.lr_floor in [0, 1]".into(),
            ));
        }
        let q = &self.quant;
        if let Some(b) = q.weight_bits.bits() {
            check_bits("quant.weight_bits", b)?;
        } else if q.weight_bits.is_mixed() {
            return Err(Error::InvalidConfig(
                "quant.weight_bits cannot be \"mixed\": the weight bitwidth is shared by all steps".into(),
            ));
        }
        if let Some(b) = q.activation_bits.bits() {
            check_bits("quant.activation_bits", b)?;
        }
        check_bits("quant.io_bits", q.io_bits)?;
        if q.activation_bits.is_mixed() {
            if q.bit_set.is_empty() {
                return Err(Error::InvalidConfig(
                    "quant.activation_bits = \"mixed\" requires a non-empty quant.bit_set".into(),
                ));
            }
            if q.bit_set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "quant.bit_set {:?} must be strictly ascending",
                    q.bit_set
                )));
            }
            for &b in &q.bit_set {
                check_bits("quant.bit_set entry", b)?;
            }
        }
        if let ClipMode::Percentile(p) = q.activation_clip {
            if !(p > 0.0 && p < 100.0) {
                return Err(Error::InvalidConfig(format!(
                    "activation clip percentile {p} must be in (0, 100)"
                )));
            }
        }
        if q.calibration_passes == 0 {
            return Err(Error::InvalidConfig("quant.calibration_passes must be positive".into()));
        }
        if self.correction.modes.is_empty() {
            return Err(Error::InvalidConfig("correction.modes is empty".into()));
        }
        for (i, m) in self.correction.modes.iter().enumerate() {
            if self.correction.modes[..i].contains(m) {
                return Err(Error::InvalidConfig(format!("correction mode `{m}` listed twice")));
            }
        }
        if self.stats.n_samples < 2 {
            return Err(Error::InvalidConfig("stats.n_samples must be at least 2".into()));
        }
        if self.sampler.n_eval == 0 || self.eval.n_projections == 0 {
            return Err(Error::InvalidConfig(
                "sampler.n_eval and eval.n_projections must be positive".into(),
            ));
        }
        Ok(())
    }
}
