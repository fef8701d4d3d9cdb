//! Acceptance suite. Every check prints one `PASS`/`FAIL` line (written
//! straight to stdout so it shows up without `--nocapture`) and then asserts.
//!
//! The full default experiments take several minutes in release mode; the
//! compare run is shared between the checks that read its logs.

use std::io::Write;
use std::sync::OnceLock;

use adpfed::data::{build_federation, generate_sample, FederationConfig, SiteShift};
use adpfed::federation::{aggregate, evaluate, ClientUpdate, ExperimentResult, RunStatus};
use adpfed::harness::{self, across_runs, CompareOutcome};
use adpfed::model::{param_count, Example, ToyModel};
use adpfed::privacy::{percentile_abs, sample_laplace, PrivacyMode, SanitizationTrace};
use adpfed::rng::derive;
use adpfed::{ExperimentConfig, ParamVector};
use rand::Rng;
use tempfile::TempDir;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} [{status}] {name}: {detail}");
    let _ = out.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn default_config(dir: &TempDir) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn default_compare() -> &'static (TempDir, ExperimentConfig, CompareOutcome) {
    static SHARED: OnceLock<(TempDir, ExperimentConfig, CompareOutcome)> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = default_config(&dir);
        let out = harness::cli_compare(&cfg).unwrap();
        (dir, cfg, out)
    })
}

fn all_results(out: &CompareOutcome) -> impl Iterator<Item = &ExperimentResult> {
    out.by_mode.iter().flat_map(|(_, r)| r)
}

fn clip_bound(mode: PrivacyMode, t: &SanitizationTrace, static_c: Option<f64>) -> f64 {
    match mode {
        PrivacyMode::None => t.pre_clip_norm,
        PrivacyMode::Adaptive => t.gamma,
        PrivacyMode::Static => static_c.expect("static run without threshold"),
    }
}

#[test]
fn criterion_1_clip_bound_holds_for_every_update() {
    let (_, cfg, out) = default_compare();
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut runs = 0usize;
    for r in all_results(out) {
        runs += 1;
        for rec in &r.records {
            for c in &rec.clients {
                checked += 1;
                let bound = clip_bound(r.mode, &c.trace, r.static_threshold);
                if c.trace.degenerate {
                    if c.trace.post_clip_norm != 0.0 {
                        violations += 1;
                    }
                } else if c.trace.post_clip_norm.is_nan() || c.trace.post_clip_norm > bound + 1e-9 {
                    violations += 1;
                }
            }
        }
    }
    let expected = 3 * cfg.repeats * cfg.rounds * cfg.data.sizes.len();
    let complete = all_results(out).all(|r| r.status == RunStatus::Completed);
    let ok = violations == 0 && (checked == expected || !complete) && runs == 3 * cfg.repeats;
    report(
        1,
        "clip bound",
        ok,
        &format!("{checked} sanitized updates over {runs} runs, {violations} above bound + 1e-9"),
    );
}

fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

#[test]
fn criterion_2_laplace_sampler_moments_and_cdf() {
    const DRAWS: usize = 100_000;
    let mut failures = Vec::new();
    for (i, &b) in [0.1, 1.0, 10.0].iter().enumerate() {
        let mut rng = derive(2024, &[i as u64]);
        let xs: Vec<f64> = (0..DRAWS).map(|_| sample_laplace(b, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / DRAWS as f64;
        let mean_abs = xs.iter().map(|x| x.abs()).sum::<f64>() / DRAWS as f64;
        let mean_tol = 4.0 * (2.0 * b * b / DRAWS as f64).sqrt();
        if mean.abs() > mean_tol {
            failures.push(format!("b={b}: mean {mean} outside ±{mean_tol}"));
        }
        if (mean_abs - b).abs() > 0.02 * b {
            failures.push(format!("b={b}: mean |x| {mean_abs}"));
        }
        for k in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let x = k * b;
            let empirical = xs.iter().filter(|&&v| v <= x).count() as f64 / DRAWS as f64;
            let gap = (empirical - laplace_cdf(x, b)).abs();
            if gap > 0.01 {
                failures.push(format!("b={b}: CDF at {x} off by {gap}"));
            }
        }
    }
    report(
        2,
        "Laplace sampler",
        failures.is_empty(),
        &if failures.is_empty() {
            "b in {0.1, 1, 10}, 1e5 draws: mean, mean |x| and CDF at 5 points within tolerance".to_string()
        } else {
            failures.join("; ")
        },
    );
}

/// Sort the nonzero magnitudes and interpolate linearly at rank p/100 (m-1).
fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (mags.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    mags[lo] + frac * (mags[hi] - mags[lo])
}

#[test]
fn criterion_3_percentile_matches_sort_and_interpolate() {
    let ps = [50.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0];
    let mut rng = derive(3, &[]);
    let mut worst = 0.0f64;
    let mut comparisons = 0usize;
    for case in 0..1000 {
        let len = rng.random_range(1..=500usize);
        let mut v: Vec<f64> = match case % 3 {
            // Few distinct values, so ties and duplicates are common.
            0 => (0..len).map(|_| rng.random_range(-3..=3) as f64 * 0.5).collect(),
            1 => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            _ => (0..len)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-100.0..100.0) })
                .collect(),
        };
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.5;
        }
        let pv = ParamVector::new(v.clone());
        for &p in &ps {
            let got = percentile_abs(&pv, p).unwrap();
            let want = percentile_oracle(&v, p);
            worst = worst.max((got - want).abs());
            comparisons += 1;
        }
    }
    report(
        3,
        "percentile oracle",
        worst <= 1e-12,
        &format!("{comparisons} comparisons, max abs difference {worst:e}"),
    );
}

#[test]
fn criterion_4_analytic_gradient_matches_central_differences() {
    let hidden = 16;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for draw in 0..10u64 {
        let mut rng = derive(4, &[draw]);
        let samples: Vec<Example> = (0..4)
            .map(|_| Example::from_sample(&generate_sample(&mut rng, &SiteShift::default(), 12).unwrap()))
            .collect();
        let batch: Vec<&Example> = samples.iter().collect();
        let w: Vec<f64> = (0..param_count(hidden)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = ToyModel::from_params(hidden, ParamVector::new(w.clone())).unwrap();
        let g = model.gradient(&batch).unwrap();
        for i in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = ToyModel::from_params(hidden, plus.into()).unwrap().loss(&batch).unwrap();
            let lm = ToyModel::from_params(hidden, minus.into()).unwrap().loss(&batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    report(
        4,
        "gradient fidelity",
        worst < 1e-4,
        &format!("10 draws x {} parameters, max relative error {worst:e}", param_count(hidden)),
    );
}

#[test]
fn criterion_5_aggregation_exact_and_order_invariant() {
    let mut rng = derive(5, &[]);
    let mut worst_closed = 0.0f64;
    let mut worst_perm = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(1..=120usize);
        let k = rng.random_range(1..=8usize);
        let global: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|site_id| ClientUpdate {
                site_id,
                delta: ParamVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
                n_k: rng.random_range(1..=150),
                trace: SanitizationTrace::default(),
            })
            .collect();
        let g = ParamVector::new(global.clone());
        let next = aggregate(&updates, &g).unwrap();

        let total: usize = updates.iter().map(|u| u.n_k).sum();
        for j in 0..d {
            let mean: f64 = updates.iter().map(|u| u.n_k as f64 * u.delta[j]).sum::<f64>() / total as f64;
            worst_closed = worst_closed.max((next[j] - (global[j] + mean)).abs());
        }

        let mut shuffled = updates.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let permuted = aggregate(&shuffled, &g).unwrap();
        let diff = next.sub(&permuted).unwrap().l2_norm() / next.l2_norm().max(f64::MIN_POSITIVE);
        worst_perm = worst_perm.max(diff);
    }
    report(
        5,
        "aggregation exactness",
        worst_closed <= 1e-12 && worst_perm <= 1e-12,
        &format!("200 cases: closed-form gap {worst_closed:e}, permutation relative change {worst_perm:e}"),
    );
}

#[test]
fn criterion_6_method_ordering_on_default_preset() {
    let (_, cfg, out) = default_compare();
    let mean = |m| across_runs(out.results(m), cfg).map_or(f64::NAN, |s| s.mean);
    let np = mean(PrivacyMode::None);
    let dp = mean(PrivacyMode::Static);
    let adp = mean(PrivacyMode::Adaptive);
    let ok = np >= adp && adp > dp && adp - dp >= 0.05 && np - adp <= 0.05;
    report(
        6,
        "trend NP-FL >= ADP-FL > DP-FL",
        ok,
        &format!(
            "test Dice NP-FL {np:.4}, DP-FL {dp:.4}, ADP-FL {adp:.4} \
             (need ADP-DP >= 0.05: {:.4}; NP-ADP <= 0.05: {:.4})",
            adp - dp,
            np - adp
        ),
    );
}

#[test]
fn criterion_7_percentile_sweep_shape() {
    let dir = TempDir::new().unwrap();
    let cfg = default_config(&dir);
    let out = harness::cli_sweep(&cfg).unwrap();
    let diverged = out.diverged_runs();
    let best = out.best_percentile(&cfg);
    let means: Vec<String> = out
        .by_percentile
        .iter()
        .map(|(p, r)| format!("p{p}={:.4}", across_runs(r, &cfg).map_or(f64::NAN, |s| s.mean)))
        .collect();
    let ok = diverged == 0 && best.is_some_and(|p| p >= 80.0);
    report(
        7,
        "percentile sweep",
        ok,
        &format!("{diverged} diverged runs, best percentile {best:?} ({})", means.join(", ")),
    );
}

#[test]
fn criterion_8_repeated_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    harness::cli_run(&default_config(&a)).unwrap();
    harness::cli_run(&default_config(&b)).unwrap();
    let mut mismatched = Vec::new();
    for file in ["rounds.csv", "summary.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        if x.is_empty() || x != y {
            mismatched.push(file);
        }
    }
    report(
        8,
        "determinism",
        mismatched.is_empty(),
        &if mismatched.is_empty() {
            "rounds.csv and summary.csv identical across two runs".to_string()
        } else {
            format!("differing files: {mismatched:?}")
        },
    );
}

#[test]
fn criterion_9_headline_comes_from_best_validation_model() {
    let (_, cfg, out) = default_compare();
    let mut problems = Vec::new();
    let mut runs = 0;
    for r in all_results(out) {
        runs += 1;
        let mut running_max = f64::NEG_INFINITY;
        let mut prev = f64::NEG_INFINITY;
        for rec in &r.records {
            if rec.best_val_dice < prev {
                problems.push(format!("{} seed {}: best_val_dice fell at round {}", r.mode, r.seed, rec.round));
            }
            prev = rec.best_val_dice;
            running_max = running_max.max(rec.mean_val_dice);
            if rec.best_val_dice < running_max {
                problems.push(format!("{} seed {}: best below observed max at round {}", r.mode, r.seed, rec.round));
            }
        }

        let fed = build_federation(&FederationConfig {
            seed: r.seed,
            ..cfg.data.clone()
        })
        .unwrap();
        let test: Vec<Example> = fed.test.iter().map(Example::from_sample).collect();
        let scores = evaluate(&r.state.best_weights, cfg.hidden, &test).unwrap();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if (mean - r.headline()).abs() > 1e-12 {
            problems.push(format!("{} seed {}: headline {} vs w_best {mean}", r.mode, r.seed, r.headline()));
        }
        if let Some(t) = r.state.best_round {
            let logged = r.records[t].mean_val_dice;
            if logged != r.state.best_val_dice {
                problems.push(format!("{} seed {}: best round {t} logged {logged}", r.mode, r.seed));
            }
        }
    }
    report(
        9,
        "dual-model saving",
        problems.is_empty(),
        &if problems.is_empty() {
            format!("{runs} runs: best_val_dice non-decreasing, headline equals w_best test Dice")
        } else {
            problems.join("; ")
        },
    );
}
