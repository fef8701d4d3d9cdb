//! Experiment commands and their CSV artifacts.
//!
//! `run` writes `rounds.csv`, `summary.csv` and `config_resolved.txt`;
//! `compare` writes `compare.csv` plus one rounds file per method; `sweep`
//! writes `sweep.csv` with one column per clipping percentile.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{validate_percentiles, ExperimentConfig, OUTPUT_ENV};
use crate::data::{build_federation, export_federation, FederationConfig};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentResult, RunStatus};
use crate::metrics::{mean_std, MeanStd};
use crate::privacy::PrivacyMode;

/// Formats a real with 10 significant digits, in positional notation
/// where that stays readable.
pub fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (9 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.9e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt_real)
}

/// Resolves the output directory: the `ADPFED_OUT` environment variable
/// replaces a value that came from a config file, an explicit
/// `--output_dir` flag wins over both.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &[String],
    env_out: Option<String>,
) -> Result<ExperimentConfig> {
    let mut cfg = match config_path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = env_out.filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn env_output_dir() -> Option<String> {
    std::env::var(OUTPUT_ENV).ok()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file))
}

/// Runs the repeats of one configuration; seeds are `seed + r`.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|r| cfg.seed + r).collect();
    #[cfg(feature = "parallel")]
    let results: Vec<Result<ExperimentResult>> = {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| run_experiment(cfg, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<ExperimentResult>> = seeds.iter().map(|&s| run_experiment(cfg, s)).collect();
    results.into_iter().collect()
}

fn completed(results: &[ExperimentResult]) -> Vec<&ExperimentResult> {
    results.iter().filter(|r| r.status == RunStatus::Completed).collect()
}

/// Mean and std over completed runs of the headline test Dice.
pub fn across_runs(results: &[ExperimentResult], cfg: &ExperimentConfig) -> Option<MeanStd> {
    let v: Vec<f64> = completed(results).iter().map(|r| r.headline()).collect();
    mean_std(&v, cfg.std_convention()).ok()
}

/// The completed run with the highest headline Dice.
pub fn best_run(results: &[ExperimentResult]) -> Option<&ExperimentResult> {
    completed(results)
        .into_iter()
        .max_by(|a, b| a.headline().total_cmp(&b.headline()))
}

/// Writes one row per round per run.
pub fn write_rounds_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let sites: Vec<usize> = results.first().map(|r| r.site_ids.clone()).unwrap_or_default();
    let mut header: Vec<String> = ["run", "seed", "mode", "round", "lr", "mean_val_dice", "best_val_dice", "degenerate_clients"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in &sites {
        for field in ["n", "loss", "val_dice", "pre_clip_norm", "post_clip_norm", "gamma", "clip_factor", "noise_b"] {
            header.push(format!("site{k}_{field}"));
        }
    }
    let mut w = writer(path)?;
    w.write_record(&header)?;
    for (run, res) in results.iter().enumerate() {
        for rec in &res.records {
            let mut row = vec![
                run.to_string(),
                res.seed.to_string(),
                res.mode.to_string(),
                rec.round.to_string(),
                fmt_real(rec.lr),
                fmt_real(rec.mean_val_dice),
                fmt_real(rec.best_val_dice),
                rec.clients.iter().filter(|c| c.trace.degenerate).count().to_string(),
            ];
            for c in &rec.clients {
                row.push(c.n_k.to_string());
                row.push(fmt_real(c.local_loss));
                row.push(fmt_opt(c.val_dice));
                row.push(fmt_real(c.trace.pre_clip_norm));
                row.push(fmt_real(c.trace.post_clip_norm));
                row.push(fmt_real(c.trace.gamma));
                row.push(fmt_real(c.trace.clip_factor));
                row.push(fmt_real(c.trace.noise_scale_b));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-run rows followed by one `across_runs` row. Test scores come from the
/// best-validation model (`best_*`) and the final model (`latest_*`); the
/// `_mean`/`_std` pair of a run row is taken across test samples, that of
/// the `across_runs` row across completed runs.
pub fn write_summary_csv(path: &Path, results: &[ExperimentResult], cfg: &ExperimentConfig) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "run",
        "seed",
        "mode",
        "status",
        "rounds_completed",
        "best_round",
        "best_val_dice",
        "static_threshold",
        "init_checksum",
        "best_test_dice_mean",
        "best_test_dice_std",
        "latest_test_dice_mean",
        "latest_test_dice_std",
    ])?;
    for (run, r) in results.iter().enumerate() {
        w.write_record([
            run.to_string(),
            r.seed.to_string(),
            r.mode.to_string(),
            r.status.as_str().to_string(),
            r.records.len().to_string(),
            r.state.best_round.map_or_else(|| "init".to_string(), |b| b.to_string()),
            fmt_real(r.state.best_val_dice),
            fmt_opt(r.static_threshold),
            format!("{:016x}", r.init_checksum),
            fmt_real(r.test_best.mean_across_samples),
            fmt_real(r.test_best.std_across_samples),
            fmt_real(r.test_latest.mean_across_samples),
            fmt_real(r.test_latest.std_across_samples),
        ])?;
    }
    let done = completed(results);
    let stat = |f: fn(&ExperimentResult) -> f64| -> Option<MeanStd> {
        let v: Vec<f64> = done.iter().map(|r| f(r)).collect();
        mean_std(&v, cfg.std_convention()).ok()
    };
    let best = stat(|r| r.test_best.mean_across_samples);
    let latest = stat(|r| r.test_latest.mean_across_samples);
    let mode = results.first().map(|r| r.mode.to_string()).unwrap_or_default();
    w.write_record([
        "across_runs".to_string(),
        String::new(),
        mode,
        format!("{}/{} completed", done.len(), results.len()),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        fmt_opt(best.map(|s| s.mean)),
        fmt_opt(best.map(|s| s.std)),
        fmt_opt(latest.map(|s| s.mean)),
        fmt_opt(latest.map(|s| s.std)),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub results: Vec<ExperimentResult>,
    pub all_diverged: bool,
}

/// `run`: repeats the configured experiment and writes its artifacts.
pub fn cli_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    let results = run_repeats(cfg)?;
    write_rounds_csv(&cfg.output_dir.join("rounds.csv"), &results)?;
    write_summary_csv(&cfg.output_dir.join("summary.csv"), &results, cfg)?;
    write_text(&cfg.output_dir.join("config_resolved.txt"), &cfg.to_text())?;
    let all_diverged = completed(&results).is_empty();
    Ok(RunOutcome { results, all_diverged })
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub by_mode: Vec<(PrivacyMode, Vec<ExperimentResult>)>,
    pub all_diverged: bool,
}

impl CompareOutcome {
    pub fn results(&self, mode: PrivacyMode) -> &[ExperimentResult] {
        self.by_mode
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, r)| r.as_slice())
            .unwrap_or(&[])
    }
}

/// `compare`: the same seeds under all three modes with matched (q, p, epsilon, sigma).
pub fn cli_compare(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    let mut by_mode = Vec::new();
    for mode in PrivacyMode::ALL {
        let mut c = cfg.clone();
        c.privacy.mode = mode;
        let results = run_repeats(&c)?;
        write_rounds_csv(&cfg.output_dir.join(format!("rounds_{mode}.csv")), &results)?;
        by_mode.push((mode, results));
    }

    let path = cfg.output_dir.join("compare.csv");
    let mut w = writer(&path)?;
    w.write_record([
        "method",
        "mode",
        "run",
        "seed",
        "status",
        "init_checksum",
        "best_round",
        "test_dice_mean",
        "test_dice_std",
        "latest_test_dice_mean",
        "latest_test_dice_std",
        "method_runs_mean",
        "method_runs_std",
        "best_run",
    ])?;
    for (mode, results) in &by_mode {
        let runs = across_runs(results, cfg);
        let best_seed = best_run(results).map(|r| r.seed);
        for (run, r) in results.iter().enumerate() {
            w.write_record([
                mode.method_name().to_string(),
                mode.to_string(),
                run.to_string(),
                r.seed.to_string(),
                r.status.as_str().to_string(),
                format!("{:016x}", r.init_checksum),
                r.state.best_round.map_or_else(|| "init".to_string(), |b| b.to_string()),
                fmt_real(r.test_best.mean_across_samples),
                fmt_real(r.test_best.std_across_samples),
                fmt_real(r.test_latest.mean_across_samples),
                fmt_real(r.test_latest.std_across_samples),
                fmt_opt(runs.map(|s| s.mean)),
                fmt_opt(runs.map(|s| s.std)),
                (Some(r.seed) == best_seed).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_text(&cfg.output_dir.join("config_resolved.txt"), &cfg.to_text())?;
    let all_diverged = by_mode.iter().all(|(_, r)| completed(r).is_empty());
    Ok(CompareOutcome { by_mode, all_diverged })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub by_percentile: Vec<(f64, Vec<ExperimentResult>)>,
    pub all_diverged: bool,
}

impl SweepOutcome {
    pub fn diverged_runs(&self) -> usize {
        self.by_percentile
            .iter()
            .flat_map(|(_, r)| r)
            .filter(|r| r.status != RunStatus::Completed)
            .count()
    }

    /// Percentile with the highest across-run mean headline Dice.
    pub fn best_percentile(&self, cfg: &ExperimentConfig) -> Option<f64> {
        self.by_percentile
            .iter()
            .filter_map(|(p, r)| across_runs(r, cfg).map(|s| (*p, s.mean)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| p)
    }
}

fn percentile_label(p: f64) -> String {
    format!("p{}", p)
}

/// `sweep`: adaptive mode at every percentile in `cfg.percentiles`.
pub fn cli_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    validate_percentiles(&cfg.percentiles)?;
    create_dir(&cfg.output_dir)?;
    let mut by_percentile = Vec::new();
    for &p in &cfg.percentiles {
        let mut c = cfg.clone();
        c.privacy.mode = PrivacyMode::Adaptive;
        c.privacy.p = p;
        by_percentile.push((p, run_repeats(&c)?));
    }

    let path = cfg.output_dir.join("sweep.csv");
    let mut w = writer(&path)?;
    let mut header = vec!["metric".to_string()];
    header.extend(cfg.percentiles.iter().map(|&p| percentile_label(p)));
    w.write_record(&header)?;

    type Cell = fn(&[ExperimentResult], &ExperimentConfig) -> String;
    let rows: [(&str, Cell); 5] = [
        ("runs_mean", |r, c| fmt_opt(across_runs(r, c).map(|s| s.mean))),
        ("runs_std", |r, c| fmt_opt(across_runs(r, c).map(|s| s.std))),
        ("samples_mean", |r, _| fmt_opt(best_run(r).map(|b| b.test_best.mean_across_samples))),
        ("samples_std", |r, _| fmt_opt(best_run(r).map(|b| b.test_best.std_across_samples))),
        ("diverged_runs", |r, _| {
            r.iter().filter(|x| x.status != RunStatus::Completed).count().to_string()
        }),
    ];
    for (name, cell) in rows {
        let mut row = vec![name.to_string()];
        row.extend(by_percentile.iter().map(|(_, r)| cell(r, cfg)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_text(&cfg.output_dir.join("config_resolved.txt"), &cfg.to_text())?;
    let all_diverged = by_percentile.iter().all(|(_, r)| completed(r).is_empty());
    Ok(SweepOutcome {
        by_percentile,
        all_diverged,
    })
}

/// `export-data`: writes the federation for `cfg.seed` to the output directory.
pub fn cli_export_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let fed = build_federation(&FederationConfig {
        seed: cfg.seed,
        ..cfg.data.clone()
    })?;
    let dir = cfg.output_dir.join("data");
    export_federation(&fed, &dir)?;
    Ok(dir)
}
