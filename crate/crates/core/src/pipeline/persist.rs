//! Versioned JSON artifacts: checkpoints, quantization ranges, correction
//! statistics, SNR tables and mixed-precision plans.
//!
//! Every file carries `"version": 1`. Floats are written in shortest
//! round-trip form, so save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::correction::CorrectionStats;
use crate::error::{Error, Result};
use crate::mixedprec::MixedPrecisionPlan;
use crate::model::{Activation, Arch, Layer, LayerNorm, LayerQuantAssignment, NoisePredictor, TrainConfig};
use crate::quant::ClipMode;

pub const FORMAT_VERSION: u64 = 1;

/// Artifacts that can be written to and read from disk.
pub trait Artifact: Sized {
    const KIND: &'static str;

    fn to_json(&self) -> Result<String>;
    fn from_json(text: &str) -> std::result::Result<Self, JsonError>;
}

/// Failure decoding an artifact, before a path is attached.
#[derive(Debug)]
pub enum JsonError {
    Version(u64),
    Parse { offset: usize, message: String },
    Invalid(Error),
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parse `text` as `T`, reporting a version mismatch in preference to a
/// shape error when the file carries a different version.
fn decode<T: DeserializeOwned>(text: &str) -> std::result::Result<T, JsonError> {
    let version = serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("version").and_then(serde_json::Value::as_u64));
    if let Some(v) = version {
        if v != FORMAT_VERSION {
            return Err(JsonError::Version(v));
        }
    }
    serde_json::from_str(text).map_err(|e| JsonError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn check_version(v: u64) -> std::result::Result<(), JsonError> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(JsonError::Version(v))
    }
}

fn encode<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("cannot serialize artifact: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn save_artifact<A: Artifact>(path: &Path, artifact: &A) -> Result<()> {
    let text = artifact.to_json()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_artifact<A: Artifact>(path: &Path) -> Result<A> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    A::from_json(&text).map_err(|e| match e {
        JsonError::Version(found) => Error::UnsupportedVersion {
            kind: A::KIND,
            found,
            supported: FORMAT_VERSION,
        },
        JsonError::Parse { offset, message } => Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        },
        JsonError::Invalid(err) => err,
    })
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(what: &str, rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Validation(format!("{what}: ragged matrix")));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Validation(format!("{what}: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    norm: Option<NormFile>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    arch: Arch,
    weights: Vec<LayerFile>,
    time_embedding: Vec<Vec<f64>>,
    train_config: Option<TrainConfig>,
}

/// A trained network and the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NoisePredictor,
    pub train_config: Option<TrainConfig>,
}

impl Artifact for Checkpoint {
    const KIND: &'static str = "checkpoint";

    fn to_json(&self) -> Result<String> {
        let net = &self.net;
        encode(&CheckpointFile {
            version: FORMAT_VERSION,
            arch: net.arch.clone(),
            weights: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weight: rows(&l.weight),
                    bias: l.bias.to_vec(),
                    norm: l.norm.as_ref().map(|n| NormFile {
                        gamma: n.gamma.to_vec(),
                        beta: n.beta.to_vec(),
                    }),
                    activation: l.activation,
                })
                .collect(),
            time_embedding: rows(&net.time_embedding),
            train_config: self.train_config.clone(),
        })
    }

    fn from_json(text: &str) -> std::result::Result<Self, JsonError> {
        let f: CheckpointFile = decode(text)?;
        check_version(f.version)?;
        let build = || -> Result<Checkpoint> {
            let layers = f
                .weights
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    Ok(Layer {
                        weight: from_rows(&format!("layer {i} weight"), l.weight)?,
                        bias: Array1::from(l.bias),
                        norm: l.norm.map(|n| LayerNorm {
                            gamma: Array1::from(n.gamma),
                            beta: Array1::from(n.beta),
                        }),
                        activation: l.activation,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let net = NoisePredictor {
                arch: f.arch,
                time_embedding: from_rows("time embedding", f.time_embedding)?,
                layers,
            };
            net.validate()?;
            Ok(Checkpoint {
                net,
                train_config: f.train_config,
            })
        };
        build().map_err(JsonError::Invalid)
    }
}

/// Activation ranges for one activation bitwidth (`None`: full precision),
/// optionally restricted to the steps it serves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub activation_bits: Option<u32>,
    /// Steps whose activations fixed the ranges; `None` means all steps.
    pub steps: Option<Vec<usize>>,
    pub layers: LayerQuantAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantArtifact {
    pub version: u64,
    pub weight_bits: Option<u32>,
    pub io_bits: u32,
    pub activation_clip: ClipMode,
    pub calibrations: Vec<Calibration>,
}

impl QuantArtifact {
    pub fn get(&self, activation_bits: Option<u32>) -> Result<&Calibration> {
        self.calibrations
            .iter()
            .find(|c| c.activation_bits == activation_bits)
            .ok_or_else(|| {
                Error::Uncalibrated(match activation_bits {
                    Some(b) => format!("no calibration for {b}-bit activations"),
                    None => "no full-precision activation entry".into(),
                })
            })
    }
}

impl Artifact for QuantArtifact {
    const KIND: &'static str = "quantization";

    fn to_json(&self) -> Result<String> {
        encode(self)
    }

    fn from_json(text: &str) -> std::result::Result<Self, JsonError> {
        let q: QuantArtifact = decode(text)?;
        check_version(q.version)?;
        for c in &q.calibrations {
            for l in &c.layers.layers {
                if let Some(w) = &l.weight {
                    w.validate().map_err(JsonError::Invalid)?;
                }
                if let crate::model::ActivationQuant::Calibrated { config } = &l.activation {
                    config.validate().map_err(JsonError::Invalid)?;
                }
            }
        }
        Ok(q)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsStep {
    t: usize,
    k: f64,
    mu_q: Vec<f64>,
    sigma_q2: f64,
    normality_p: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    version: u64,
    n_samples: usize,
    per_step: Vec<StatsStep>,
}

impl Artifact for CorrectionStats {
    const KIND: &'static str = "stats";

    fn to_json(&self) -> Result<String> {
        self.validate()?;
        encode(&StatsFile {
            version: FORMAT_VERSION,
            n_samples: self.n_samples,
            per_step: (0..self.steps())
                .map(|i| StatsStep {
                    t: i + 1,
                    k: self.k[i],
                    mu_q: self.mu_q[i].clone(),
                    sigma_q2: self.sigma_q2[i],
                    normality_p: self.normality_p[i],
                })
                .collect(),
        })
    }

    fn from_json(text: &str) -> std::result::Result<Self, JsonError> {
        let f: StatsFile = decode(text)?;
        check_version(f.version)?;
        if let Some((i, s)) = f.per_step.iter().enumerate().find(|(i, s)| s.t != i + 1) {
            return Err(JsonError::Invalid(Error::Validation(format!(
                "stats entry {i} has t = {}, expected {}",
                s.t,
                i + 1
            ))));
        }
        let stats = CorrectionStats {
            k: f.per_step.iter().map(|s| s.k).collect(),
            mu_q: f.per_step.iter().map(|s| s.mu_q.clone()).collect(),
            sigma_q2: f.per_step.iter().map(|s| s.sigma_q2).collect(),
            n_samples: f.n_samples,
            normality_p: f.per_step.iter().map(|s| s.normality_p).collect(),
        };
        stats.validate().map_err(JsonError::Invalid)?;
        Ok(stats)
    }
}

/// Per-step SNR of each measured activation bitwidth, with the forward SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrTable {
    pub bit_set: Vec<u32>,
    /// `snr_q[t − 1][j]` belongs to `bit_set[j]`.
    pub snr_q: Vec<Vec<f64>>,
    pub snr_f: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnrStep {
    t: usize,
    snr_q: BTreeMap<u32, f64>,
    snr_f: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnrFile {
    version: u64,
    bit_set: Vec<u32>,
    per_step: Vec<SnrStep>,
}

fn snr_steps(bit_set: &[u32], snr_q: &[Vec<f64>], snr_f: &[f64]) -> Vec<SnrStep> {
    snr_q
        .iter()
        .zip(snr_f)
        .enumerate()
        .map(|(i, (row, &f))| SnrStep {
            t: i + 1,
            snr_q: bit_set.iter().copied().zip(row.iter().copied()).collect(),
            snr_f: f,
        })
        .collect()
}

fn unpack_snr(bit_set: &[u32], steps: &[SnrStep]) -> std::result::Result<(Vec<Vec<f64>>, Vec<f64>), JsonError> {
    let mut snr_q = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        if s.t != i + 1 || s.snr_q.keys().copied().ne(bit_set.iter().copied()) {
            return Err(JsonError::Invalid(Error::Validation(format!(
                "per-step entry {i} does not match the bit set {bit_set:?}"
            ))));
        }
        snr_q.push(s.snr_q.values().copied().collect());
    }
    Ok((snr_q, steps.iter().map(|s| s.snr_f).collect()))
}

impl Artifact for SnrTable {
    const KIND: &'static str = "snr";

    fn to_json(&self) -> Result<String> {
        encode(&SnrFile {
            version: FORMAT_VERSION,
            bit_set: self.bit_set.clone(),
            per_step: snr_steps(&self.bit_set, &self.snr_q, &self.snr_f),
        })
    }

    fn from_json(text: &str) -> std::result::Result<Self, JsonError> {
        let f: SnrFile = decode(text)?;
        check_version(f.version)?;
        let (snr_q, snr_f) = unpack_snr(&f.bit_set, &f.per_step)?;
        Ok(SnrTable {
            bit_set: f.bit_set,
            snr_q,
            snr_f,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanStep {
    t: usize,
    activation_bits: u32,
    snr_q: BTreeMap<u32, f64>,
    snr_f: f64,
    bops: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    version: u64,
    weight_bits: u32,
    bit_set: Vec<u32>,
    per_step: Vec<PlanStep>,
    total_bops: f64,
    compression_ratio: f64,
}

impl Artifact for MixedPrecisionPlan {
    const KIND: &'static str = "plan";

    fn to_json(&self) -> Result<String> {
        self.validate()?;
        let t = self.steps();
        if self.snr_q.len() != t || self.snr_f.len() != t || self.bops_per_step.len() != t {
            return Err(Error::Validation(
                "plan tables must cover every step before saving".into(),
            ));
        }
        let steps = snr_steps(&self.bit_set, &self.snr_q, &self.snr_f);
        encode(&PlanFile {
            version: FORMAT_VERSION,
            weight_bits: self.weight_bits,
            bit_set: self.bit_set.clone(),
            per_step: steps
                .into_iter()
                .zip(&self.activation_bits)
                .zip(&self.bops_per_step)
                .map(|((s, &b), &bops)| PlanStep {
                    t: s.t,
                    activation_bits: b,
                    snr_q: s.snr_q,
                    snr_f: s.snr_f,
                    bops,
                })
                .collect(),
            total_bops: self.total_bops,
            compression_ratio: self.compression_ratio,
        })
    }

    fn from_json(text: &str) -> std::result::Result<Self, JsonError> {
        let f: PlanFile = decode(text)?;
        check_version(f.version)?;
        let as_snr: Vec<SnrStep> = f
            .per_step
            .iter()
            .map(|s| SnrStep {
                t: s.t,
                snr_q: s.snr_q.clone(),
                snr_f: s.snr_f,
            })
            .collect();
        let (snr_q, snr_f) = unpack_snr(&f.bit_set, &as_snr)?;
        let plan = MixedPrecisionPlan {
            weight_bits: f.weight_bits,
            bit_set: f.bit_set,
            activation_bits: f.per_step.iter().map(|s| s.activation_bits).collect(),
            snr_q,
            snr_f,
            bops_per_step: f.per_step.iter().map(|s| s.bops).collect(),
            total_bops: f.total_bops,
            compression_ratio: f.compression_ratio,
        };
        plan.validate().map_err(JsonError::Invalid)?;
        Ok(plan)
    }
}

/// Write an `n × d` sample matrix as CSV with header `x0,x1,...`.
pub fn write_samples_csv(path: &Path, samples: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = (0..samples.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in samples.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let width = r.headers().map_err(|e| csv_error(path, e))?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for field in rec.iter() {
            values.push(field.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: rec.position().map_or(0, |p| p.byte() as usize),
                message: format!("`{field}`: {e}"),
            })?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, width), values).map_err(|e| Error::Validation(e.to_string()))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: format!("{other:?}"),
        },
    }
}
