//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use ptqd::correction::{
    calibrate_variance_ddim, calibrate_variance_ddpm, calibrated_variance_ddim, calibrated_variance_ddpm, estimate_k,
    measure_correlation, normality_test, CorrectionStats,
};
use ptqd::mixedprec::{compute_bops, select_plan, MixedPrecisionPlan};
use ptqd::model::{normalize_rows, Arch, EpsModel};
use ptqd::pipeline::config::{ExperimentConfig, Precision};
use ptqd::pipeline::experiment::{calibrate_stage, plan_stage, train_stage, FP_RUN, REPORT_FILE};
use ptqd::pipeline::Runner;
use ptqd::quant::{quantize_dequantize, QuantConfig};
use ptqd::rng::{normal, seeded};
use ptqd::sampler::{ddpm_step, generate_samples_with, CorrectionMode, Denoiser};
use ptqd::schedule::NoiseSchedule;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "[{tag}] criterion {id:>2} {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn round_half_away(v: f64) -> f64 {
    let a = v.abs();
    let f = a.floor();
    let r = if a - f >= 0.5 { f + 1.0 } else { f };
    r.copysign(v)
}

/// Nearest code index to `v` in `0..=levels`, ties going away from zero.
fn nearest_code(v: f64, levels: u32) -> f64 {
    let mut best = 0.0f64;
    let mut best_d = f64::INFINITY;
    for n in 0..=levels {
        let n = n as f64;
        let d = (v - n).abs();
        if d < best_d || (d == best_d && n.abs() > best.abs()) {
            best = n;
            best_d = d;
        }
    }
    best
}

#[test]
fn c01_quantizer_matches_code_enumeration() {
    let start = Instant::now();
    let mut rng = seeded(11);
    let mut mismatches = 0usize;
    let mut ties = 0usize;
    let mut total = 0usize;
    for bits in 2..=4u32 {
        let levels = (1u32 << bits) - 1;
        for i in 0..10_000 {
            let (l, u, x) = if i % 4 == 0 {
                // Dyadic grid with the input on a half step, so rounding ties occur.
                let step = 0.25;
                let l = -(rng.random_range(0..=levels) as f64) * step;
                let u = l + levels as f64 * step;
                let j = rng.random_range(0..levels) as f64;
                (l, u, l + (j + 0.5) * step)
            } else {
                let l = rng.random_range(-5.0..1.0);
                let u = l + rng.random_range(0.01..10.0);
                (l, u, rng.random_range(l - 2.0..u + 2.0))
            };
            let cfg = QuantConfig::per_tensor(bits, l, u).unwrap();
            let got = quantize_dequantize(&ndarray::arr1(&[x]), &cfg).unwrap()[0];

            let step = (u - l) / levels as f64;
            let zero = -l / step;
            let v = x.clamp(l, u) / step + zero;
            if (v - v.floor() - 0.5).abs() == 0.0 {
                ties += 1;
            }
            let want = step * (nearest_code(v, levels) - round_half_away(zero));
            total += 1;
            if got.to_bits() != want.to_bits() && got != want {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && ties > 0 && secs < 1.0;
    verdict(
        1,
        "quantizer brute-force oracle",
        pass,
        format!("{mismatches}/{total} mismatches, {ties} exact ties, {secs:.3}s"),
    );
    assert!(pass);
}

#[test]
fn c02_k_recovery() {
    let start = Instant::now();
    let n = 100_000;
    let mut rng = seeded(12);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for &k_true in &[0.0, 0.1, 0.3, 0.5, -0.2] {
        let eps = Array2::from_shape_fn((n / 2, 2), |_| normal(&mut rng));
        let sd = eps.std(0.0);
        let delta = eps.mapv(|e| k_true * e) + Array2::from_shape_fn((n / 2, 2), |_| 0.1 * sd * normal(&mut rng));
        let k = estimate_k(eps.view(), delta.view()).unwrap();
        if k_true < 0.0 {
            lines.push(format!("k*={k_true} -> {k}"));
            if k != 0.0 {
                worst = f64::INFINITY;
            }
        } else {
            worst = worst.max((k - k_true).abs());
            lines.push(format!("k*={k_true} -> {k:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 0.01 && secs < 5.0;
    verdict(
        2,
        "k recovery",
        pass,
        format!("{}; max error {worst:.4}, {secs:.2}s", lines.join(", ")),
    );
    assert!(pass);
}

/// Two-step schedule whose second step has the given `β`, `ᾱ` and the DDPM
/// posterior variance.
fn two_step_schedule(beta: f64, alpha_bar: f64) -> NoiseSchedule {
    let alpha = 1.0 - beta;
    let ab1 = alpha_bar / alpha;
    let sigma2 = beta * (1.0 - ab1) / (1.0 - alpha_bar);
    NoiseSchedule {
        steps: 2,
        eta: 1.0,
        beta: vec![1.0 - ab1, beta],
        alpha: vec![ab1, alpha],
        alpha_bar: vec![ab1, alpha_bar],
        sigma: vec![0.0, sigma2.sqrt()],
        sigma_calibrated: None,
    }
}

fn stats_with(steps: usize, k: Vec<f64>, mu: Vec<Vec<f64>>, sigma_q2: Vec<f64>) -> CorrectionStats {
    CorrectionStats {
        k,
        mu_q: mu,
        sigma_q2,
        n_samples: 1024,
        normality_p: vec![1.0; steps],
    }
}

#[test]
fn c03_variance_budget() {
    let start = Instant::now();
    let trials = 100_000;
    let mut rng = seeded(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let beta = rng.random_range(0.001..0.2);
        let alpha = 1.0 - beta;
        let alpha_bar = rng.random_range(0.05..0.9) * alpha;
        let k: f64 = rng.random_range(0.0..0.5);
        let mu = rng.random_range(-0.3..0.3);
        let sched = two_step_schedule(beta, alpha_bar);
        let sigma2 = sched.sigma(2).powi(2);
        // Residual variance absorbing a random fraction of the step noise.
        let frac = rng.random_range(0.05..0.95);
        let sigma_q2 = frac * sigma2 * alpha * (1.0 - alpha_bar) * (1.0 + k).powi(2) / (beta * beta);
        let stats = stats_with(2, vec![0.0, k], vec![vec![0.0], vec![mu]], vec![0.0, sigma_q2]);
        let cal = calibrate_variance_ddpm(&sched, &stats).unwrap();
        assert!(cal.clamped_steps.is_empty());
        let sched = sched.with_calibrated(cal.sigma).unwrap();

        let (x_t, eps) = (0.7, 0.4);
        let sq = sigma_q2.sqrt();
        let eps_hat = Array2::from_shape_fn((trials, 1), |_| (1.0 + k) * eps + mu + sq * normal(&mut rng));
        let z = Array2::from_shape_fn((trials, 1), |_| normal(&mut rng));
        let x = Array2::from_elem((trials, 1), x_t);
        let out = ddpm_step(x.view(), 2, eps_hat.view(), &sched, z.view(), CorrectionMode::ALL, Some(&stats)).unwrap();
        let var = out.var(1.0);
        worst = worst.max((var / sigma2 - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 0.02 && secs < 30.0;
    verdict(
        3,
        "variance budget",
        pass,
        format!("worst relative variance error {:.3}% over 20 settings, {secs:.2}s", 100.0 * worst),
    );
    assert!(pass);
}

fn rel_close(got: f64, want: f64) -> bool {
    if want == 0.0 {
        got == 0.0
    } else {
        ((got - want) / want).abs() <= 1e-12
    }
}

fn oracle_ddpm(beta: f64, alpha: f64, alpha_bar: f64, k: f64, sigma2: f64, sigma_q2: f64) -> f64 {
    let v = sigma2 - beta.powi(2) / (alpha * (1.0 - alpha_bar)) * sigma_q2 / (1.0 + k).powi(2);
    v.max(0.0)
}

fn oracle_ddim(ab_prev: f64, ab: f64, k: f64, sigma2: f64, sigma_q2: f64) -> f64 {
    let lambda = (ab_prev * (1.0 - ab) / ab).sqrt() + (1.0 - ab_prev - sigma2).sqrt();
    (sigma2 - lambda.powi(2) * sigma_q2 / (1.0 + k).powi(2)).max(0.0)
}

#[test]
fn c04_substitution_oracles() {
    let mut rng = seeded(14);
    let mut bad = 0usize;
    let mut clamped = [0usize; 2];
    let mut open = [0usize; 2];
    for _ in 0..1000 {
        let beta = rng.random_range(1e-4..0.5);
        let alpha = 1.0 - beta;
        let ab = rng.random_range(0.01..0.99) * alpha;
        let k: f64 = rng.random_range(0.0..1.0);
        let sigma2 = rng.random_range(1e-4..0.5) * beta;
        let excess = beta * beta / (alpha * (1.0 - ab) * (1.0 + k).powi(2));
        let sigma_q2 = rng.random_range(0.0..2.0) * sigma2 / excess;
        let want = oracle_ddpm(beta, alpha, ab, k, sigma2, sigma_q2);
        let got = calibrated_variance_ddpm(beta, alpha, ab, k, sigma2, sigma_q2);
        if want == 0.0 { clamped[0] += 1 } else { open[0] += 1 }
        bad += usize::from(!rel_close(got, want));

        let ab: f64 = rng.random_range(0.01..0.98);
        let ab_prev: f64 = rng.random_range(ab..0.99);
        let sigma2 = rng.random_range(0.0..1.0) * (1.0 - ab_prev);
        let lambda2 = ((ab_prev * (1.0 - ab) / ab).sqrt() + (1.0 - ab_prev - sigma2).sqrt()).powi(2);
        let sigma_q2 = rng.random_range(0.0..2.0) * sigma2 * (1.0 + k).powi(2) / lambda2;
        let want = oracle_ddim(ab_prev, ab, k, sigma2, sigma_q2);
        let got = calibrated_variance_ddim(ab_prev, ab, k, sigma2, sigma_q2, true).unwrap();
        if want == 0.0 { clamped[1] += 1 } else { open[1] += 1 }
        bad += usize::from(!rel_close(got, want));
    }

    // Schedule-level entry points against the same oracles.
    let mut sched_bad = 0usize;
    for _ in 0..20 {
        let steps = 50;
        let beta_min = rng.random_range(1e-5..1e-3);
        let beta_max = rng.random_range(0.02..0.2);
        let eta = rng.random_range(0.2..1.0);
        let sched = NoiseSchedule::linear(steps, beta_min, beta_max, eta).unwrap();
        let k: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..0.6)).collect();
        let sq: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..0.05)).collect();
        let stats = stats_with(steps, k.clone(), vec![vec![0.0]; steps], sq.clone());
        let ddpm = calibrate_variance_ddpm(&sched, &stats).unwrap();
        let ddim = calibrate_variance_ddim(&sched, &stats, true).unwrap();
        for t in 1..=steps {
            let s2 = sched.sigma(t).powi(2);
            let want = oracle_ddpm(sched.beta(t), sched.alpha(t), sched.alpha_bar(t), k[t - 1], s2, sq[t - 1]);
            sched_bad += usize::from(!rel_close(ddpm.sigma[t - 1].powi(2), want));
            let want = oracle_ddim(sched.alpha_bar_prev(t), sched.alpha_bar(t), k[t - 1], s2, sq[t - 1]);
            sched_bad += usize::from(!rel_close(ddim.sigma[t - 1].powi(2), want));
        }
    }
    let pass = bad == 0 && sched_bad == 0 && clamped.iter().chain(&open).all(|&c| c > 0);
    verdict(
        4,
        "variance calibration substitution oracles",
        pass,
        format!(
            "{bad} scalar and {sched_bad} schedule mismatches; DDPM {} clamped/{} open, DDIM {} clamped/{} open",
            clamped[0], open[0], clamped[1], open[1]
        ),
    );
    assert!(pass);
}

/// Two-sided p-value of a Pearson correlation over `n` pairs.
fn correlation_p(r: f64, n: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    2.0 * StudentsT::new(0.0, 1.0, df).unwrap().sf(t.abs())
}

#[test]
fn c05_normalization_induces_correlation() {
    let (rows, cols) = (256, 128);
    let mut all_ok = true;
    let mut min_post = f64::INFINITY;
    let mut max_pre = 0.0f64;
    let mut max_p = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = seeded(500 + seed);
        let offsets: Vec<f64> = (0..rows).map(|_| rng.random_range(0.5..2.0)).collect();
        let y = Array2::from_shape_fn((rows, cols), |(i, _)| offsets[i] + normal(&mut rng));
        let var_frac = rng.random_range(0.05..0.5);
        let mean_frac = rng.random_range(0.05..0.5);
        let shift = mean_frac * y.mean().unwrap();
        let noise_sd = (var_frac * y.var(0.0)).sqrt();
        let delta = Array2::from_shape_fn((rows, cols), |_| shift + noise_sd * normal(&mut rng));
        let y_hat = &y + &delta;
        let (dm, dv) = (
            (y_hat.mean().unwrap() / y.mean().unwrap() - 1.0).abs(),
            (y_hat.var(0.0) / y.var(0.0) - 1.0).abs(),
        );
        assert!(dm >= 0.05 && dv >= 0.05);

        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        let r_pre = measure_correlation(&flat(&delta), &flat(&y)).unwrap();
        let (y_bar, _) = normalize_rows(&y);
        let (y_hat_bar, _) = normalize_rows(&y_hat);
        let delta_bar = &y_hat_bar - &y_bar;
        let r_post = measure_correlation(&flat(&delta_bar), &flat(&y_bar)).unwrap();
        let p = correlation_p(r_post, rows * cols);
        max_pre = max_pre.max(r_pre.abs());
        min_post = min_post.min(r_post.abs());
        max_p = max_p.max(p);
        all_ok &= r_pre.abs() < 0.02 && r_post.abs() > 0.02 && p < 0.01;
    }
    verdict(
        5,
        "normalization-induced correlation",
        all_ok,
        format!("max |r| before {max_pre:.4}, min |r| after {min_post:.4}, max p {max_p:.2e} over 20 seeds"),
    );
    assert!(all_ok);
}

/// Smooth analytic noise predictor standing in for a trained network.
struct Analytic;

impl EpsModel for Analytic {
    fn predict(&self, x: ArrayView2<'_, f64>, t: usize) -> ptqd::Result<Array2<f64>> {
        Ok(x.mapv(|v| 0.8 * v.tanh() + 0.002 * t as f64))
    }
}

#[test]
fn c06_exact_mean_correction() {
    let steps = 100;
    let sched = NoiseSchedule::linear(steps, 1e-4, 0.15, 1.0).unwrap();
    let den = Denoiser::uniform(&Analytic, steps, 2);
    let (n, seed) = (512, 21);
    let fp = generate_samples_with(&den, &sched, n, seed, |x, t, eps, z| {
        ddpm_step(x, t, eps, &sched, z, CorrectionMode::NONE, None)
    })
    .unwrap();
    let mode = CorrectionMode {
        cnc: true,
        bc: true,
        vsc: false,
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for k in [0.1, 0.5] {
        let mu = vec![0.05, -0.03];
        let stats = stats_with(steps, vec![k; steps], vec![mu.clone(); steps], vec![0.0; steps]);
        let corrected = generate_samples_with(&den, &sched, n, seed, |x, t, eps, z| {
            let mut eps_hat = eps.mapv(|e| (1.0 + k) * e);
            for mut row in eps_hat.rows_mut() {
                row.iter_mut().zip(&mu).for_each(|(v, m)| *v += m);
            }
            ddpm_step(x, t, eps_hat.view(), &sched, z, mode, Some(&stats))
        })
        .unwrap();
        let differing = fp.iter().zip(&corrected).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        let max_dev = fp.iter().zip(&corrected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pass &= differing == 0;
        lines.push(format!("k={k}: {differing}/{} values differ, max |dev| {max_dev:.2e}", fp.len()));
    }
    verdict(6, "exact mean correction (bitwise)", pass, lines.join("; "));
    assert!(pass, "corrected trajectories are not bitwise identical to full precision");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn c07_toy_ablation_ordering() {
    let start = Instant::now();
    let ladder = ["none", "cnc", "cnc+vsc", "cnc+vsc+bc"];
    let mut per_run: Vec<Vec<f64>> = vec![Vec::new(); ladder.len() + 1];
    for s in 0..5u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.override_all(s * 1000);
        let dir = tempfile::tempdir().unwrap();
        let out = Runner::new(cfg, dir.path()).unwrap().run().unwrap();
        for (i, name) in ladder.iter().enumerate() {
            per_run[i].push(out.report.sliced_wasserstein(name).unwrap());
        }
        per_run[ladder.len()].push(out.report.sliced_wasserstein(FP_RUN).unwrap());
    }
    let med: Vec<f64> = per_run.iter().map(|v| median(v.clone())).collect();
    let (none, cnc, vsc, full, fp) = (med[0], med[1], med[2], med[3], med[4]);
    let secs = start.elapsed().as_secs_f64();
    let checks = [
        ("full<=cnc+vsc", full <= vsc),
        ("cnc+vsc<=cnc", vsc <= cnc),
        ("cnc<=none", cnc <= none),
        ("full<=2*fp", full <= 2.0 * fp),
        ("runtime<600s", secs < 600.0),
    ];
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        7,
        "toy ablation ordering",
        pass,
        format!(
            "median SW none {none:.4}, cnc {cnc:.4}, cnc+vsc {vsc:.4}, cnc+vsc+bc {full:.4}, fp {fp:.4}; {secs:.0}s{}",
            if failed.is_empty() { String::new() } else { format!("; violated: {}", failed.join(", ")) }
        ),
    );
    for (name, vals) in ladder.iter().chain(std::iter::once(&FP_RUN)).zip(&per_run) {
        let _ = writeln!(std::io::stdout(), "    {name:<12} {vals:.4?}");
    }
    assert!(pass);
}

#[test]
fn c08_snr_trends() {
    let mut cfg = ExperimentConfig::default();
    cfg.quant.activation_bits = Precision::MIXED;
    let (ck, _) = train_stage(&cfg).unwrap();
    let quant = calibrate_stage(&cfg, &ck.net).unwrap();
    let (_, _, table) = plan_stage(&cfg, &ck.net, &quant).unwrap();
    let j4 = table.bit_set.iter().position(|&b| b == 4).unwrap();
    let j8 = table.bit_set.iter().position(|&b| b == 8).unwrap();
    let steps = table.snr_q.len();
    let ordered = table.snr_q.iter().filter(|row| row[j8] >= row[j4]).count();
    let frac = ordered as f64 / steps as f64;
    let tenth = steps / 10;
    // Sampling runs from t = T down to 1, so the final tenth is t = 1..=T/10.
    let last = median(table.snr_q[..tenth].iter().map(|r| r[j4]).collect());
    let first = median(table.snr_q[steps - tenth..].iter().map(|r| r[j4]).collect());
    let pass = frac >= 0.95 && last < first;
    verdict(
        8,
        "SNR trends",
        pass,
        format!(
            "8-bit >= 4-bit on {:.1}% of steps; 4-bit median SNR final tenth {last:.3} vs first tenth {first:.3}",
            100.0 * frac
        ),
    );
    assert!(pass);
}

/// Minimum-BOPs plan over every assignment, restricted to assignments where
/// each step meets its SNR threshold when any bitwidth can.
fn exhaustive_plan(snr_q: &[Vec<f64>], snr_f: &[f64], bit_set: &[u32]) -> Vec<u32> {
    let steps = snr_f.len();
    let nb = bit_set.len();
    let mut best: Option<(u64, Vec<u32>)> = None;
    for code in 0..nb.pow(steps as u32) {
        let mut c = code;
        let choice: Vec<usize> = (0..steps)
            .map(|_| {
                let j = c % nb;
                c /= nb;
                j
            })
            .collect();
        let feasible = choice.iter().enumerate().all(|(t, &j)| {
            let any = snr_q[t].iter().any(|&q| q > snr_f[t]);
            if any {
                snr_q[t][j] > snr_f[t]
            } else {
                j == nb - 1
            }
        });
        if !feasible {
            continue;
        }
        let cost: u64 = choice.iter().map(|&j| bit_set[j] as u64).sum();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, choice.iter().map(|&j| bit_set[j]).collect()));
        }
    }
    best.unwrap().1
}

#[test]
fn c09_mixed_precision_rule() {
    let mut rng = seeded(19);
    let bit_set = [2, 4, 8];
    let mut mismatches = 0usize;
    let mut fallbacks = 0usize;
    for _ in 0..300 {
        let steps = 5;
        let snr_f: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..10.0)).collect();
        let snr_q: Vec<Vec<f64>> = (0..steps)
            .map(|_| {
                let mut row: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..12.0)).collect();
                row.sort_by(f64::total_cmp);
                row
            })
            .collect();
        fallbacks += snr_q.iter().zip(&snr_f).filter(|(r, &f)| r.iter().all(|&q| q <= f)).count();
        let plan = select_plan(&snr_q, &snr_f, &bit_set, 4).unwrap();
        mismatches += usize::from(plan.activation_bits != exhaustive_plan(&snr_q, &snr_f, &bit_set));
    }

    // Affine layers of a 2-input, 4-embedding, [3, 5]-hidden MLP:
    // 6x3, 3x5 and 5x2, i.e. 18, 15 and 10 MACs.
    let arch = Arch {
        input_dim: 2,
        emb_dim: 4,
        hidden: vec![3, 5],
        steps: 2,
    };
    let macs = arch.layer_macs();
    let mut plan = MixedPrecisionPlan::constant(2, 4, 4);
    plan.activation_bits = vec![4, 8];
    let bops = compute_bops(&macs, &plan, Some(8)).unwrap();
    // Step 1: 18*8*8 + 15*4*4 + 10*8*8 = 2032; step 2: 1152 + 15*4*8 + 640 = 2272.
    let hand_ok = macs == vec![18, 15, 10] && bops.bops_per_step == vec![2032.0, 2272.0] && bops.total == 4304.0;
    let w8a8 = compute_bops(&macs, &MixedPrecisionPlan::constant(2, 8, 8), None).unwrap();
    let ratio_ok = w8a8.compression_ratio_vs_fp32 == 16.0;
    let pass = mismatches == 0 && fallbacks > 0 && hand_ok && ratio_ok;
    verdict(
        9,
        "mixed-precision rule and BOPs",
        pass,
        format!(
            "{mismatches}/300 plan mismatches ({fallbacks} fallback steps); hand BOPs {:?}; W8A8 ratio {}",
            bops.bops_per_step, w8a8.compression_ratio_vs_fp32
        ),
    );
    assert!(pass);
}

#[test]
fn c10_normality_machinery() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = 10_000;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let quantiles: Vec<f64> = (0..n).map(|i| std_normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
    let normal_res = normality_test(&quantiles).unwrap();
    let mut rng = seeded(20);
    let uniform: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let uniform_res = normality_test(&uniform).unwrap();
    let pass = normal_res.statistic < 0.01 && uniform_res.p_value < 1e-3;
    verdict(
        10,
        "normality machinery",
        pass,
        format!(
            "normal quantiles D = {:.5}; uniform D = {:.4}, p = {:.2e}",
            normal_res.statistic, uniform_res.statistic, uniform_res.p_value
        ),
    );
    assert!(pass);
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n_train = 1024;
    cfg.dataset.n_heldout = 512;
    cfg.schedule.steps = 20;
    cfg.train.epochs = 5;
    cfg.quant.calibration_passes = 64;
    cfg.stats.n_samples = 256;
    cfg.sampler.n_eval = 600;
    cfg.eval.n_projections = 32;
    cfg
}

fn report_bytes(dir: &std::path::Path, threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| Runner::new(small_config(), dir).unwrap().run().unwrap());
    std::fs::read(dir.join(REPORT_FILE)).unwrap()
}

#[test]
fn c11_determinism() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = report_bytes(dirs[0].path(), 1);
    let b = report_bytes(dirs[1].path(), 1);
    let c = report_bytes(dirs[2].path(), 4);
    let pass = a == b && a == c;
    verdict(
        11,
        "determinism",
        pass,
        format!(
            "rerun identical: {}; 1 vs 4 workers identical: {} ({} report bytes)",
            a == b,
            a == c,
            a.len()
        ),
    );
    assert!(pass);
}
