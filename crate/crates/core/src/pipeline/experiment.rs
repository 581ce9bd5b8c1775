//! Stage functions and the resumable experiment runner.
//!
//! Stages: train (or load) → calibrate → plan (mixed precision only) →
//! stats → sample → evaluate → report. Each stage's output is persisted in
//! the output directory; a rerun loads whatever is already there and
//! recomputes only what is missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::correction::{
    calibrate_variance_ddim, calibrate_variance_ddpm, collect_noise_trace, stats_from_trace, CalibratedSigma,
    CorrectionStats, NoiseTrace,
};
use crate::error::{Error, Result};
use crate::metrics::{moment_report, MetricReport};
use crate::mixedprec::{compute_snr_q, select_plan, MixedPrecisionPlan};
use crate::model::{make_dataset, train_toy, EpsModel, LayerQuantAssignment, NoisePredictor, TrainSummary};
use crate::rng;
use crate::sampler::{self, generate_samples, CorrectionMode, Denoiser, SamplerKind, TRAJECTORY_CHUNK};
use crate::schedule::NoiseSchedule;

use super::config::ExperimentConfig;
use super::persist::{
    load_artifact, read_samples_csv, save_artifact, write_samples_csv, Artifact, Calibration, Checkpoint,
    QuantArtifact, SnrTable, FORMAT_VERSION,
};
use super::report::{build_report, write_plot_csvs, ExperimentReport};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const QUANT_FILE: &str = "quant.json";
pub const QUANT_MIXED_FILE: &str = "quant_mixed.json";
pub const PLAN_FILE: &str = "plan.json";
pub const SNR_FILE: &str = "snr.json";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "report.json";
/// Name of the full-precision reference run among the sample sets.
pub const FP_RUN: &str = "fp";

/// Bitwidth recorded for a full-precision operand in plans and BOPs.
pub const FP_BITS: u32 = 32;

pub fn samples_file(run: &str) -> String {
    format!("samples_{}.csv", run.replace('+', "_"))
}

/// Layer inputs seen along full-precision trajectories, indexed
/// `[t − 1][layer]` and flattened.
pub type ActivationRecord = Vec<Vec<Vec<f64>>>;

/// Run `n` full-precision trajectories (no corrections) and record every
/// layer's input at every step.
pub fn record_activations(
    net: &NoisePredictor,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<ActivationRecord> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one calibration trajectory".into()));
    }
    let dim = net.arch.input_dim;
    let n_layers = net.layers.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(TRAJECTORY_CHUNK)
        .map(|s| (s, (s + TRAJECTORY_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut streams: Vec<_> = (start..end).map(|i| rng::stream(seed, i as u64)).collect();
            let mut x = sampler::draw_prior(&mut streams, dim);
            let mut per_step = vec![Vec::new(); sched.steps];
            for t in (1..=sched.steps).rev() {
                per_step[t - 1] = net
                    .layer_inputs(x.view(), t)?
                    .into_iter()
                    .map(|a| a.into_iter().collect::<Vec<f64>>())
                    .collect::<Vec<_>>();
                let eps = net.predict(x.view(), t)?;
                let z = sampler::draw_step_noise(&mut streams, dim, t);
                x = sampler::step(kind, x.view(), t, eps.view(), sched, z.view(), CorrectionMode::NONE, None)?;
            }
            Ok(per_step)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: ActivationRecord = vec![vec![Vec::new(); n_layers]; sched.steps];
    for part in parts {
        for (step_out, step_in) in out.iter_mut().zip(part) {
            for (layer_out, layer_in) in step_out.iter_mut().zip(step_in) {
                layer_out.extend(layer_in);
            }
        }
    }
    Ok(out)
}

/// Per-layer activation samples pooled over `steps` (1-based).
fn pool_steps(record: &ActivationRecord, steps: &[usize]) -> Vec<Vec<f64>> {
    let n_layers = record.first().map_or(0, Vec::len);
    (0..n_layers)
        .map(|l| steps.iter().flat_map(|&t| record[t - 1][l].iter().copied()).collect())
        .collect()
}

fn calibrate_one(
    net: &NoisePredictor,
    cfg: &ExperimentConfig,
    act_bits: Option<u32>,
    record: Option<&ActivationRecord>,
    steps: Option<Vec<usize>>,
) -> Result<Calibration> {
    let q = &cfg.quant;
    let mut layers = LayerQuantAssignment::with_bits(net, q.weight_bits.bits(), act_bits, q.io_bits)?;
    if !layers.is_calibrated() {
        let record = record.ok_or_else(|| Error::Uncalibrated("no activation record".into()))?;
        let all: Vec<usize> = (1..=cfg.schedule.steps).collect();
        let pooled = pool_steps(record, steps.as_deref().unwrap_or(&all));
        layers.calibrate_activations(&pooled, q.activation_clip)?;
    }
    Ok(Calibration {
        activation_bits: act_bits,
        steps,
        layers,
    })
}

fn needs_record(cfg: &ExperimentConfig) -> bool {
    !cfg.quant.is_full_precision()
}

fn activation_record(net: &NoisePredictor, sched: &NoiseSchedule, cfg: &ExperimentConfig) -> Result<Option<ActivationRecord>> {
    if !needs_record(cfg) {
        return Ok(None);
    }
    record_activations(
        net,
        sched,
        cfg.sampler.kind,
        cfg.quant.calibration_passes,
        cfg.seeds.calibration_seed,
    )
    .map(Some)
}

/// Train a network per the config, or load `model.checkpoint`.
pub fn train_stage(cfg: &ExperimentConfig) -> Result<(Checkpoint, Option<TrainSummary>)> {
    if let Some(path) = &cfg.model.checkpoint {
        let ck: Checkpoint = load_artifact(path)?;
        if ck.net.arch != cfg.arch() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {} has architecture {:?}, config asks for {:?}",
                path.display(),
                ck.net.arch,
                cfg.arch()
            )));
        }
        return Ok((ck, None));
    }
    let sched = cfg.schedule.build()?;
    let data = make_dataset(cfg.dataset.kind, cfg.dataset.n_train, cfg.seeds.data_seed)?;
    let train_cfg = cfg.train_config();
    let (net, summary) = train_toy(&data, &sched, cfg.arch(), &train_cfg)?;
    Ok((
        Checkpoint {
            net,
            train_config: Some(train_cfg),
        },
        Some(summary),
    ))
}

/// Fix activation clipping ranges for every activation bitwidth the config
/// uses, from layer inputs over all steps.
pub fn calibrate_stage(cfg: &ExperimentConfig, net: &NoisePredictor) -> Result<QuantArtifact> {
    let sched = cfg.schedule.build()?;
    let record = activation_record(net, &sched, cfg)?;
    let calibrations = cfg
        .quant
        .activation_variants()
        .into_iter()
        .map(|b| calibrate_one(net, cfg, b, record.as_ref(), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantArtifact {
        version: FORMAT_VERSION,
        weight_bits: cfg.quant.weight_bits.bits(),
        io_bits: cfg.quant.io_bits,
        activation_clip: cfg.quant.activation_clip,
        calibrations,
    })
}

/// Run `f` with the denoiser described by `quant` (and `plan`, for
/// mixed precision).
pub fn with_denoiser<R>(
    net: &NoisePredictor,
    quant: &QuantArtifact,
    plan: Option<&MixedPrecisionPlan>,
    f: impl FnOnce(&Denoiser<'_>) -> Result<R>,
) -> Result<R> {
    let models = quant
        .calibrations
        .iter()
        .map(|c| Ok((c.activation_bits, net.quantized(&c.layers)?)))
        .collect::<Result<Vec<_>>>()?;
    let steps = net.arch.steps;
    let dim = net.arch.input_dim;
    let denoiser = match plan {
        Some(plan) => {
            if plan.steps() != steps {
                return Err(Error::InvalidInput(format!(
                    "plan covers {} steps, network has {steps}",
                    plan.steps()
                )));
            }
            let per_step = plan
                .activation_bits
                .iter()
                .map(|&b| {
                    models
                        .iter()
                        .find(|(bits, _)| *bits == Some(b))
                        .map(|(_, m)| m as &dyn EpsModel)
                        .ok_or_else(|| Error::Uncalibrated(format!("no calibration for {b}-bit activations")))
                })
                .collect::<Result<Vec<_>>>()?;
            Denoiser::per_step(per_step, dim)
        }
        None => {
            if models.len() != 1 {
                return Err(Error::InvalidInput(format!(
                    "{} calibrations but no plan to choose between them",
                    models.len()
                )));
            }
            Denoiser::uniform(&models[0].1, steps, dim)
        }
    };
    f(&denoiser)
}

fn snr_column(trace: &NoiseTrace) -> Result<Vec<f64>> {
    trace
        .eps
        .iter()
        .zip(&trace.delta)
        .map(|(e, d)| compute_snr_q(e.view(), d.view()))
        .collect()
}

fn snr_forward(cfg: &ExperimentConfig, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    (1..=sched.steps)
        .map(|t| sched.snr_forward(t, cfg.schedule.snr_forward))
        .collect()
}

fn plan_weight_bits(quant: &QuantArtifact) -> u32 {
    quant.weight_bits.unwrap_or(FP_BITS)
}

/// Two-pass mixed-precision planning. Measures the SNR of each bitwidth on
/// uncorrected models with globally calibrated ranges, selects the plan,
/// then re-calibrates every bitwidth on the steps it was assigned.
pub fn plan_stage(
    cfg: &ExperimentConfig,
    net: &NoisePredictor,
    quant: &QuantArtifact,
) -> Result<(MixedPrecisionPlan, QuantArtifact, SnrTable)> {
    if !cfg.quant.activation_bits.is_mixed() {
        return Err(Error::InvalidConfig("planning needs quant.activation_bits = \"mixed\"".into()));
    }
    let sched = cfg.schedule.build()?;
    let bit_set = cfg.quant.bit_set.clone();
    let mut columns = Vec::with_capacity(bit_set.len());
    for &b in &bit_set {
        let cal = quant.get(Some(b))?;
        let q = net.quantized(&cal.layers)?;
        let den = Denoiser::uniform(&q, sched.steps, net.arch.input_dim);
        let trace = collect_noise_trace(net, &den, &sched, cfg.sampler.kind, cfg.stats.n_samples, cfg.seeds.stats_seed)?;
        columns.push(snr_column(&trace)?);
    }
    let snr_q: Vec<Vec<f64>> = (0..sched.steps)
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    let snr_f = snr_forward(cfg, &sched)?;
    let io = (!cfg.quant.is_full_precision()).then_some(cfg.quant.io_bits);
    let plan = select_plan(&snr_q, &snr_f, &bit_set, plan_weight_bits(quant))?
        .with_bops(&net.arch.layer_macs(), io)?;

    let record = activation_record(net, &sched, cfg)?;
    let by_bits = plan.steps_by_bits();
    let calibrations = bit_set
        .iter()
        .map(|&b| match by_bits.get(&b) {
            Some(steps) => calibrate_one(net, cfg, Some(b), record.as_ref(), Some(steps.clone())),
            None => quant.get(Some(b)).cloned(),
        })
        .collect::<Result<Vec<_>>>()?;
    let mixed = QuantArtifact {
        calibrations,
        ..quant.clone()
    };
    let table = SnrTable {
        bit_set,
        snr_q,
        snr_f,
    };
    Ok((plan, mixed, table))
}

/// Correction statistics of the final denoiser, collected on
/// full-precision trajectories, plus its per-step SNR.
pub fn stats_stage(
    cfg: &ExperimentConfig,
    net: &NoisePredictor,
    quant: &QuantArtifact,
    plan: Option<&MixedPrecisionPlan>,
) -> Result<(CorrectionStats, SnrTable)> {
    let sched = cfg.schedule.build()?;
    let trace = with_denoiser(net, quant, plan, |den| {
        collect_noise_trace(net, den, &sched, cfg.sampler.kind, cfg.stats.n_samples, cfg.seeds.stats_seed)
    })?;
    let stats = stats_from_trace(&trace)?;
    let label = cfg.quant.activation_bits.bits().unwrap_or(FP_BITS);
    let table = SnrTable {
        bit_set: vec![label],
        snr_q: snr_column(&trace)?.into_iter().map(|v| vec![v]).collect(),
        snr_f: snr_forward(cfg, &sched)?,
    };
    Ok((stats, table))
}

/// Variance-schedule calibration for the configured sampler, or `None` when
/// no mode uses it.
pub fn calibrate_sigma(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    stats: &CorrectionStats,
) -> Result<Option<CalibratedSigma>> {
    if !cfg.needs_vsc() {
        return Ok(None);
    }
    let cal = match cfg.sampler.kind {
        SamplerKind::Ddpm => calibrate_variance_ddpm(sched, stats)?,
        SamplerKind::Ddim => calibrate_variance_ddim(sched, stats, cfg.correction.ddim_k_factor)?,
    };
    Ok(Some(cal))
}

/// Sampling schedule with calibrated σ' attached when available.
pub fn sampling_schedule(cfg: &ExperimentConfig, stats: &CorrectionStats) -> Result<(NoiseSchedule, Option<CalibratedSigma>)> {
    let sched = cfg.schedule.build()?;
    let cal = calibrate_sigma(cfg, &sched, stats)?;
    let sched = match &cal {
        Some(c) => sched.with_calibrated(c.sigma.clone())?,
        None => sched,
    };
    Ok((sched, cal))
}

/// Names of the sample sets an experiment produces: the full-precision
/// reference first, then one per correction mode.
pub fn run_names(cfg: &ExperimentConfig) -> Vec<String> {
    std::iter::once(FP_RUN.to_string())
        .chain(cfg.correction.modes.iter().map(CorrectionMode::to_string))
        .collect()
}

/// Generate one named sample set. All sets share `sample_seed`, so they are
/// driven by the same prior and step noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_run(
    cfg: &ExperimentConfig,
    net: &NoisePredictor,
    quant: &QuantArtifact,
    plan: Option<&MixedPrecisionPlan>,
    stats: &CorrectionStats,
    sched: &NoiseSchedule,
    run: &str,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = cfg.sampler.n_eval;
    let kind = cfg.sampler.kind;
    if run == FP_RUN {
        let den = Denoiser::uniform(net, sched.steps, net.arch.input_dim);
        return generate_samples(&den, sched, kind, CorrectionMode::NONE, None, n, seed);
    }
    let mode: CorrectionMode = run.parse()?;
    with_denoiser(net, quant, plan, |den| {
        generate_samples(den, sched, kind, mode, mode.needs_stats().then_some(stats), n, seed)
    })
}

/// Compare every sample set against held-out data.
pub fn eval_stage(cfg: &ExperimentConfig, samples: &[(String, Array2<f64>)]) -> Result<BTreeMap<String, MetricReport>> {
    let heldout = make_dataset(cfg.dataset.kind, cfg.dataset.n_heldout, cfg.seeds.heldout_seed)?;
    samples
        .iter()
        .map(|(name, s)| {
            Ok((
                name.clone(),
                moment_report(&heldout, s, cfg.eval.n_projections, cfg.seeds.metric_seed)?,
            ))
        })
        .collect()
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Everything a finished experiment produced.
pub struct Outputs {
    pub checkpoint: Checkpoint,
    pub train_summary: Option<TrainSummary>,
    pub quant: QuantArtifact,
    pub plan: Option<MixedPrecisionPlan>,
    pub stats: CorrectionStats,
    pub snr: SnrTable,
    pub samples: Vec<(String, Array2<f64>)>,
    pub report: ExperimentReport,
}

/// Resumable, artifact-backed execution of an experiment in one directory.
pub struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    /// Fail instead of computing when an artifact is missing.
    load_only: bool,
}

impl Runner {
    /// Validate the config and claim `out`. A directory that already holds
    /// artifacts from a different config is refused.
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let echo = cfg.to_toml_string();
        let path = out.join(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(existing) if existing != echo => {
                return Err(Error::InvalidConfig(format!(
                    "{} holds artifacts from a different configuration; use a fresh output directory",
                    out.display()
                )))
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&path, echo).map_err(|e| Error::io(&path, e))?;
            }
            Err(e) => return Err(Error::io(&path, e)),
        }
        Ok(Runner {
            cfg,
            out,
            load_only: false,
        })
    }

    pub fn load_only(mut self, yes: bool) -> Self {
        self.load_only = yes;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn cached<A: Artifact>(&self, file: &str, name: &'static str, make: impl FnOnce() -> Result<A>) -> Result<A> {
        let path = self.out.join(file);
        if path.exists() {
            return stage_load(name, &path);
        }
        if self.load_only {
            return Err(missing(name, &path));
        }
        let value = stage(name, make())?;
        stage(name, save_artifact(&path, &value))?;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Result<(Checkpoint, Option<TrainSummary>)> {
        let mut summary = None;
        let ck = self.cached(CHECKPOINT_FILE, "train", || {
            let (ck, s) = train_stage(&self.cfg)?;
            summary = s;
            Ok(ck)
        })?;
        if ck.net.arch != self.cfg.arch() {
            return Err(Error::Stage {
                stage: "train",
                source: Box::new(Error::InvalidConfig("stored checkpoint does not match the configured architecture".into())),
            });
        }
        Ok((ck, summary))
    }

    pub fn quant(&self, net: &NoisePredictor) -> Result<QuantArtifact> {
        self.cached(QUANT_FILE, "calibrate", || calibrate_stage(&self.cfg, net))
    }

    /// Plan, re-calibrated ranges and SNR table (mixed precision only).
    pub fn plan(&self, net: &NoisePredictor, quant: &QuantArtifact) -> Result<Option<(MixedPrecisionPlan, QuantArtifact, SnrTable)>> {
        if !self.cfg.quant.activation_bits.is_mixed() {
            return Ok(None);
        }
        let files = [PLAN_FILE, QUANT_MIXED_FILE, SNR_FILE];
        if files.iter().all(|f| self.out.join(f).exists()) {
            return Ok(Some((
                stage_load("plan", &self.out.join(PLAN_FILE))?,
                stage_load("plan", &self.out.join(QUANT_MIXED_FILE))?,
                stage_load("plan", &self.out.join(SNR_FILE))?,
            )));
        }
        if self.load_only {
            return Err(missing("plan", &self.out.join(PLAN_FILE)));
        }
        let (plan, mixed, table) = stage("plan", plan_stage(&self.cfg, net, quant))?;
        stage("plan", save_artifact(&self.out.join(PLAN_FILE), &plan))?;
        stage("plan", save_artifact(&self.out.join(QUANT_MIXED_FILE), &mixed))?;
        stage("plan", save_artifact(&self.out.join(SNR_FILE), &table))?;
        Ok(Some((plan, mixed, table)))
    }

    /// Correction statistics, plus the SNR table when no plan supplied one.
    pub fn stats(
        &self,
        net: &NoisePredictor,
        quant: &QuantArtifact,
        plan: Option<&MixedPrecisionPlan>,
    ) -> Result<(CorrectionStats, Option<SnrTable>)> {
        let stats_path = self.out.join(STATS_FILE);
        let snr_path = self.out.join(SNR_FILE);
        let want_snr = plan.is_none();
        if stats_path.exists() && (!want_snr || snr_path.exists()) {
            let stats = stage_load("stats", &stats_path)?;
            let snr = want_snr.then(|| stage_load("stats", &snr_path)).transpose()?;
            return Ok((stats, snr));
        }
        if self.load_only {
            return Err(missing("stats", &stats_path));
        }
        let (stats, table) = stage("stats", stats_stage(&self.cfg, net, quant, plan))?;
        stage("stats", save_artifact(&stats_path, &stats))?;
        if want_snr {
            stage("stats", save_artifact(&snr_path, &table))?;
        }
        Ok((stats, want_snr.then_some(table)))
    }

    pub fn samples(
        &self,
        net: &NoisePredictor,
        quant: &QuantArtifact,
        plan: Option<&MixedPrecisionPlan>,
        stats: &CorrectionStats,
    ) -> Result<Vec<(String, Array2<f64>)>> {
        let (sched, _) = stage("sample", sampling_schedule(&self.cfg, stats))?;
        run_names(&self.cfg)
            .into_iter()
            .map(|name| {
                let path = self.out.join(samples_file(&name));
                let s = if path.exists() {
                    stage("sample", read_samples_csv(&path))?
                } else if self.load_only {
                    return Err(missing("sample", &path));
                } else {
                    let s = stage(
                        "sample",
                        sample_run(&self.cfg, net, quant, plan, stats, &sched, &name, self.cfg.seeds.sample_seed),
                    )?;
                    stage("sample", write_samples_csv(&path, &s))?;
                    s
                };
                if s.nrows() != self.cfg.sampler.n_eval || s.ncols() != net.arch.input_dim {
                    return Err(Error::Stage {
                        stage: "sample",
                        source: Box::new(Error::Validation(format!(
                            "{} has shape {:?}, expected ({}, {})",
                            path.display(),
                            s.dim(),
                            self.cfg.sampler.n_eval,
                            net.arch.input_dim
                        ))),
                    });
                }
                Ok((name, s))
            })
            .collect()
    }

    /// Every stage, then the report and plot CSVs.
    pub fn run(&self) -> Result<Outputs> {
        let (checkpoint, train_summary) = self.checkpoint()?;
        let net = &checkpoint.net;
        let global = self.quant(net)?;
        let planned = self.plan(net, &global)?;
        let (plan, quant, plan_snr) = match planned {
            Some((p, q, s)) => (Some(p), q, Some(s)),
            None => (None, global, None),
        };
        let (stats, stats_snr) = self.stats(net, &quant, plan.as_ref())?;
        let snr = plan_snr.or(stats_snr).expect("one of plan or stats yields an SNR table");
        let samples = self.samples(net, &quant, plan.as_ref(), &stats)?;
        let metrics = stage("eval", eval_stage(&self.cfg, &samples))?;
        let report = stage(
            "report",
            build_report(&self.cfg, net, &quant, plan.as_ref(), &stats, &snr, metrics),
        )?;
        stage("report", report.save(&self.out.join(REPORT_FILE)))?;
        stage("report", write_plot_csvs(&self.out, &report))?;
        Ok(Outputs {
            checkpoint,
            train_summary,
            quant,
            plan,
            stats,
            snr,
            samples,
            report,
        })
    }
}

fn stage_load<A: Artifact>(stage: &'static str, path: &Path) -> Result<A> {
    load_artifact(path).map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

fn missing(stage: &'static str, path: &Path) -> Error {
    Error::Stage {
        stage,
        source: Box::new(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "artifact not produced yet"),
        )),
    }
}

/// Run the whole experiment in `out` and return its report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    Ok(Runner::new(cfg.clone(), out)?.run()?.report)
}
