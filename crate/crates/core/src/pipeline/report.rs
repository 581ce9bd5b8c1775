//! Experiment report JSON and plot-ready CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correction::{CalibratedSigma, CorrectionStats};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::mixedprec::{compute_bops, MixedPrecisionPlan};
use crate::model::NoisePredictor;

use super::config::ExperimentConfig;
use super::experiment::{calibrate_sigma, FP_BITS};
use super::persist::{csv_error, QuantArtifact, SnrTable, FORMAT_VERSION};

pub const SNR_CSV: &str = "snr_vs_step.csv";
pub const K_CSV: &str = "k_vs_step.csv";
pub const SIGMA_CSV: &str = "sigma_schedule.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub snr_f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub bit_set: Vec<u32>,
    /// `snr_q[t − 1][j]` belongs to `bit_set[j]`.
    pub snr_q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BopsReport {
    pub weight_bits: u32,
    /// Activation bitwidth per step (index `t − 1`).
    pub activation_bits: Vec<u32>,
    pub io_bits: Option<u32>,
    pub bops_per_step: Vec<f64>,
    pub total_bops: f64,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u64,
    pub config: ExperimentConfig,
    pub schedule: ScheduleTable,
    pub stats: CorrectionStats,
    /// Present when a correction mode uses variance-schedule calibration.
    pub variance_calibration: Option<CalibratedSigma>,
    pub snr: SnrReport,
    pub bops: BopsReport,
    /// Keyed by run name: `fp` for the full-precision reference, otherwise
    /// the correction mode.
    pub metrics: BTreeMap<String, MetricReport>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("cannot serialize report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ExperimentReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?;
        if r.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "report",
                found: r.version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(r)
    }

    /// Sliced-Wasserstein distance of a named run.
    pub fn sliced_wasserstein(&self, run: &str) -> Option<f64> {
        self.metrics.get(run).map(|m| m.sliced_wasserstein)
    }
}

pub fn build_report(
    cfg: &ExperimentConfig,
    net: &NoisePredictor,
    quant: &QuantArtifact,
    plan: Option<&MixedPrecisionPlan>,
    stats: &CorrectionStats,
    snr: &SnrTable,
    metrics: BTreeMap<String, MetricReport>,
) -> Result<ExperimentReport> {
    let sched = cfg.schedule.build()?;
    let steps = sched.steps;
    let schedule = ScheduleTable {
        beta: (1..=steps).map(|t| sched.beta(t)).collect(),
        alpha_bar: (1..=steps).map(|t| sched.alpha_bar(t)).collect(),
        sigma: (1..=steps).map(|t| sched.sigma(t)).collect(),
        snr_f: snr.snr_f.clone(),
    };
    let full_precision = cfg.quant.is_full_precision();
    let io_bits = (!full_precision).then_some(quant.io_bits);
    let bops = match plan {
        Some(p) => BopsReport {
            weight_bits: p.weight_bits,
            activation_bits: p.activation_bits.clone(),
            io_bits,
            bops_per_step: p.bops_per_step.clone(),
            total_bops: p.total_bops,
            compression_ratio: p.compression_ratio,
        },
        None => {
            let act = cfg.quant.activation_bits.bits().unwrap_or(FP_BITS);
            let constant = MixedPrecisionPlan::constant(steps, quant.weight_bits.unwrap_or(FP_BITS), act);
            let b = compute_bops(&net.arch.layer_macs(), &constant, io_bits)?;
            BopsReport {
                weight_bits: constant.weight_bits,
                activation_bits: constant.activation_bits,
                io_bits,
                bops_per_step: b.bops_per_step,
                total_bops: b.total,
                compression_ratio: b.compression_ratio_vs_fp32,
            }
        }
    };
    Ok(ExperimentReport {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        schedule,
        stats: stats.clone(),
        variance_calibration: calibrate_sigma(cfg, &sched, stats)?,
        snr: SnrReport {
            bit_set: snr.bit_set.clone(),
            snr_q: snr.snr_q.clone(),
        },
        bops,
        metrics,
    })
}

fn write_csv(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `snr_vs_step.csv`, `k_vs_step.csv` and `sigma_schedule.csv`, one row per
/// step in order `t = 1..=T`.
pub fn write_plot_csvs(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let steps = report.schedule.beta.len();

    let mut header = vec!["t".to_string()];
    header.extend(report.snr.bit_set.iter().map(|b| format!("snr_q_{b}")));
    header.push("snr_f".into());
    write_csv(
        &dir.join(SNR_CSV),
        header,
        (0..steps).map(|i| {
            let mut row = vec![(i + 1).to_string()];
            row.extend(report.snr.snr_q[i].iter().map(f64::to_string));
            row.push(report.schedule.snr_f[i].to_string());
            row
        }),
    )?;

    let channels = report.stats.mu_q.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string(), "k".to_string(), "sigma_q2".to_string()];
    header.extend((0..channels).map(|c| format!("mu_q_{c}")));
    write_csv(
        &dir.join(K_CSV),
        header,
        (0..steps).map(|i| {
            let mut row = vec![
                (i + 1).to_string(),
                report.stats.k[i].to_string(),
                report.stats.sigma_q2[i].to_string(),
            ];
            row.extend(report.stats.mu_q[i].iter().map(f64::to_string));
            row
        }),
    )?;

    let cal = report.variance_calibration.as_ref();
    write_csv(
        &dir.join(SIGMA_CSV),
        ["t", "beta", "alpha_bar", "sigma", "sigma_calibrated"]
            .map(String::from)
            .to_vec(),
        (0..steps).map(|i| {
            vec![
                (i + 1).to_string(),
                report.schedule.beta[i].to_string(),
                report.schedule.alpha_bar[i].to_string(),
                report.schedule.sigma[i].to_string(),
                cal.map_or_else(String::new, |c| c.sigma[i].to_string()),
            ]
        }),
    )
}
