use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ptqd::pipeline::experiment::{eval_stage, REPORT_FILE};
use ptqd::pipeline::{ExperimentConfig, Runner};

/// Post-training quantization with noise correction for a toy diffusion model.
#[derive(Debug, Parser)]
#[command(name = "ptqd", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to anything not set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts. The PTQD_OUT environment variable
    /// takes precedence when set.
    #[arg(long, global = true, default_value = "ptqd_out")]
    out: PathBuf,

    /// Replace every named seed, offset by its position in the seeds section.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the noise predictor (or load the configured checkpoint).
    Train,
    /// Fix activation clipping ranges.
    Calibrate,
    /// Measure SNR per bitwidth and choose per-step activation bitwidths.
    Plan,
    /// Collect correction statistics.
    Stats,
    /// Generate the reference and per-mode sample sets.
    Sample,
    /// Print sliced-Wasserstein and moment errors against held-out data.
    Eval,
    /// Run every stage and write the report.
    Run,
    /// Rebuild the report from existing artifacts without computing any.
    Report,
}

fn out_dir(flag: PathBuf) -> PathBuf {
    match std::env::var_os("PTQD_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag,
    }
}

fn load_config(cli: &Cli) -> ptqd::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed_override {
        cfg.seeds.override_all(seed);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let cfg = load_config(&cli)?;
    let runner = Runner::new(cfg, out_dir(cli.out.clone()))?;
    let out = runner.out_dir().display().to_string();
    match cli.command {
        Command::Train => {
            let (ck, summary) = runner.checkpoint()?;
            match summary.and_then(|s| s.epoch_losses.last().copied()) {
                Some(loss) => println!("trained {} layers, final loss {loss:.6}", ck.net.layers.len()),
                None => println!("checkpoint loaded ({} layers)", ck.net.layers.len()),
            }
        }
        Command::Calibrate => {
            let (ck, _) = runner.checkpoint()?;
            let q = runner.quant(&ck.net)?;
            println!("calibrated {} activation setting(s) in {out}", q.calibrations.len());
        }
        Command::Plan => {
            let (ck, _) = runner.checkpoint()?;
            let q = runner.quant(&ck.net)?;
            match runner.plan(&ck.net, &q)? {
                Some((plan, _, _)) => {
                    for (bits, steps) in plan.steps_by_bits() {
                        println!("{bits}-bit activations: {} steps", steps.len());
                    }
                    println!("total BOPs {:.6e}, compression vs FP32 {:.3}", plan.total_bops, plan.compression_ratio);
                }
                None => println!("activation bits are not \"mixed\"; nothing to plan"),
            }
        }
        Command::Stats => {
            let (ck, _) = runner.checkpoint()?;
            let global = runner.quant(&ck.net)?;
            let (plan, quant) = match runner.plan(&ck.net, &global)? {
                Some((p, q, _)) => (Some(p), q),
                None => (None, global),
            };
            let (stats, _) = runner.stats(&ck.net, &quant, plan.as_ref())?;
            let mean_k = stats.k.iter().sum::<f64>() / stats.k.len() as f64;
            println!("statistics over {} steps, mean k {mean_k:.5}", stats.steps());
        }
        Command::Sample | Command::Eval => {
            let (ck, _) = runner.checkpoint()?;
            let global = runner.quant(&ck.net)?;
            let (plan, quant) = match runner.plan(&ck.net, &global)? {
                Some((p, q, _)) => (Some(p), q),
                None => (None, global),
            };
            let (stats, _) = runner.stats(&ck.net, &quant, plan.as_ref())?;
            let samples = runner.samples(&ck.net, &quant, plan.as_ref(), &stats)?;
            if matches!(cli.command, Command::Sample) {
                println!("{} sample sets in {out}", samples.len());
            } else {
                let metrics = eval_stage(runner.config(), &samples)?;
                println!("{:<14} {:>12} {:>12}", "run", "sliced_w2", "cov_err");
                for (name, _) in &samples {
                    let m = &metrics[name];
                    println!("{name:<14} {:>12.6} {:>12.6}", m.sliced_wasserstein, m.covariance_error);
                }
            }
        }
        Command::Run | Command::Report => {
            let runner = runner.load_only(matches!(cli.command, Command::Report));
            let outputs = runner.run()?;
            for (name, m) in &outputs.report.metrics {
                println!("{name:<14} sliced_w2 {:.6}", m.sliced_wasserstein);
            }
            println!("report written to {out}/{REPORT_FILE}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<ptqd::Error>() {
                Some(pe) => {
                    eprintln!("error: {pe}");
                    eprintln!("code: {}", pe.code());
                    ExitCode::from(pe.exit_code() as u8)
                }
                None => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
