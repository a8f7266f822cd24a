mod acqgrid;
mod compare;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pesc_core::benchmarks::Method;

use crate::acqgrid::AcqGridArgs;
use crate::compare::Stat;
use crate::error::{io_err, usage, CliError, CliResult};

#[derive(Parser)]
#[command(name = "cbo", version, about = "Constrained Bayesian-optimization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured benchmark over its seed range.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (overrides `jobs` in the config).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Utility-gap curves with bootstrap bands from one or more run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "median")]
        stat: Stat,
    },
    /// Posterior moments and acquisition values of a 1D snapshot on a grid.
    Acqgrid {
        #[arg(long)]
        snapshot: PathBuf,
        /// Comma-separated subset of pesc,rs.
        #[arg(long, value_delimiter = ',', default_value = "pesc,rs")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        minimizer_samples: usize,
        #[arg(long, default_value_t = 1000)]
        features: usize,
        #[arg(long, default_value_t = 10_000)]
        rs_samples: usize,
    },
    /// Write a state snapshot of a synthetic problem observed at a random design.
    Snapshot {
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        constraints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        observations: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, out, jobs } => run::cmd_run(run::RunArgs { config, out, jobs }),
        Command::Compare { dirs, out, stat } => compare::cmd_compare(&dirs, &out, stat),
        Command::Acqgrid { snapshot, methods, out, grid, seed, minimizer_samples, features, rs_samples } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>().map_err(|e| CliError::Usage(e.to_string())))
                .collect::<CliResult<Vec<_>>>()?;
            if methods.is_empty() {
                return usage("--methods is empty");
            }
            let state = acqgrid::read_snapshot(&snapshot)?;
            let args = AcqGridArgs { grid, seed, minimizer_samples, features, rs_samples };
            let (header, rows) = acqgrid::acquisition_grid(&state, &methods, &args)?;
            acqgrid::write_grid(&out, &header, &rows)
        }
        Command::Snapshot { d, constraints, seed, observations, out } => {
            let snap = acqgrid::synthetic_snapshot(d, constraints, seed, observations)?;
            let mut text = serde_json::to_string_pretty(&snap).expect("snapshots serialize");
            text.push('\n');
            std::fs::write(&out, text).map_err(|e| io_err(&out, e))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
