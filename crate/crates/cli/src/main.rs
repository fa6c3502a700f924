//! `tbd`: simulate scenarios, run Monte Carlo tracking, compare against the
//! grid oracle and aggregate metrics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tbd_core::cli_runner::{cmd_metrics, cmd_oracle_compare, cmd_simulate, cmd_track, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "tbd",
    version,
    about = "Track-before-detect particle filter toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scenario to PGM frames and a ground-truth CSV.
    Simulate(Common),
    /// Simulate, preprocess and track for a number of Monte Carlo runs.
    Track(Common),
    /// Compare filter and grid-oracle presence probabilities.
    OracleCompare(Common),
    /// Re-aggregate run CSVs in --out into metrics.csv.
    Metrics {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Spec file or preset name (scenario1 ... scenario4b, oracle-small, oracle-neutral).
    #[arg(long)]
    scenario: String,
    /// TOML file replacing the [filter] (and optionally [preprocess]) tables.
    #[arg(long)]
    filter: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write run 0's preprocessed frames.
    #[arg(long)]
    dump_frames: bool,
    /// Use the estimated residual noise level in the filter.
    #[arg(long)]
    auto_sigma: bool,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn manifest(self) -> RunManifest {
        RunManifest {
            scenario: self.scenario,
            filter: self.filter,
            seed: self.seed,
            runs: self.runs,
            out: self.out,
            dump_frames: self.dump_frames,
            auto_sigma: self.auto_sigma,
            threads: self.threads,
        }
    }
}

fn run(cli: Cli) -> tbd_core::Result<()> {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c.manifest()),
        Command::Track(c) => {
            let report = cmd_track(&c.manifest())?;
            let present: Vec<f64> = report
                .metrics
                .iter()
                .filter(|m| m.truth_present)
                .map(|m| m.detect_prob)
                .collect();
            if !present.is_empty() {
                log::info!(
                    "mean detection probability while present: {:.3}",
                    present.iter().sum::<f64>() / present.len() as f64
                );
            }
            Ok(())
        }
        Command::OracleCompare(c) => {
            let (_, summary) = cmd_oracle_compare(&c.manifest())?;
            if let (Some(max), Some(mean)) = (summary.max_abs_diff, summary.mean_abs_diff) {
                println!("max |dp| = {max:.6}, mean |dp| = {mean:.6}");
            }
            Ok(())
        }
        Command::Metrics { out } => cmd_metrics(&out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
