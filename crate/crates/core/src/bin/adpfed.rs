use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adpfed::harness::{self, across_runs};
use adpfed::{Error, ExperimentConfig};

/// Federated learning simulator with adaptive differentially private updates.
#[derive(Parser)]
#[command(name = "adpfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repeat one configured experiment and write rounds.csv / summary.csv.
    Run(Common),
    /// Run the non-private, static and adaptive modes on identical seeds.
    Compare(Common),
    /// Sweep the clipping percentile in adaptive mode.
    Sweep(Common),
    /// Export the generated federation as flat binaries plus a manifest.
    ExportData(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` using config key names, e.g. `--privacy.p 90`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn execute(cli: Cli) -> Result<u8, Error> {
    let common = match &cli.command {
        Command::Run(c) | Command::Compare(c) | Command::Sweep(c) | Command::ExportData(c) => c,
    };
    let cfg: ExperimentConfig =
        harness::resolve_config(common.config.as_deref(), &common.overrides, harness::env_output_dir())?;

    let all_diverged = match cli.command {
        Command::Run(_) => {
            let out = harness::cli_run(&cfg)?;
            if let Some(s) = across_runs(&out.results, &cfg) {
                println!("{}: test Dice {:.4} ± {:.4}", cfg.privacy.mode, s.mean, s.std);
            }
            out.all_diverged
        }
        Command::Compare(_) => {
            let out = harness::cli_compare(&cfg)?;
            for (mode, results) in &out.by_mode {
                if let Some(s) = across_runs(results, &cfg) {
                    println!("{:>7}: test Dice {:.4} ± {:.4}", mode.method_name(), s.mean, s.std);
                }
            }
            out.all_diverged
        }
        Command::Sweep(_) => {
            let out = harness::cli_sweep(&cfg)?;
            for (p, results) in &out.by_percentile {
                if let Some(s) = across_runs(results, &cfg) {
                    println!("p={p:>5}: test Dice {:.4} ± {:.4}", s.mean, s.std);
                }
            }
            out.all_diverged
        }
        Command::ExportData(_) => {
            let dir = harness::cli_export_data(&cfg)?;
            println!("wrote {}", dir.display());
            false
        }
    };
    if all_diverged {
        eprintln!("every run diverged");
        return Ok(1);
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(0)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
