//! Command-line harness: simulation runs, semi-synthetic dataset runs, the
//! Schur-versus-oracle equivalence sweep and the update micro-benchmark.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bench;
mod run;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "schurvins", version, about = "Schur-complement VIO backend harness")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the filter on simulated data, one run per seed.
    Sim {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to `--seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the filter on a recorded IMU stream with synthetic feature tracks.
    Euroc {
        /// EuRoC sequence directory (the root or its `mav0`).
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare the Schur update against the brute-force oracles.
    Verify {
        /// Number of random instances.
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Optional directory for a per-trial CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the Schur update stages against the dense oracle.
    Bench {
        /// Optional TOML benchmark configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional directory for the CSV table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for command-line misuse, matching clap.
const USAGE: u8 = 2;

fn require_file(path: &Path) -> Result<(), ExitCode> {
    if path.is_file() {
        Ok(())
    } else {
        eprintln!("error: config file not found: {}", path.display());
        Err(ExitCode::from(USAGE))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SV_LOG", "warn")).init();
    let cli = Cli::parse();
    let config = match &cli.command {
        Command::Sim { config, .. } => Some(config),
        Command::Euroc { config, .. } | Command::Bench { config, .. } => config.as_ref(),
        Command::Verify { .. } => None,
    };
    if let Some(path) = config {
        if let Err(code) = require_file(path) {
            return code;
        }
    }
    let result = match cli.command {
        Command::Sim { config, out, seeds } => {
            let seeds = if seeds.is_empty() { vec![cli.seed] } else { seeds };
            run::cmd_sim(&config, &out, &seeds)
        }
        Command::Euroc { dataset, out, config } => run::cmd_euroc(&dataset, &out, config.as_deref(), cli.seed),
        Command::Verify { trials, out } => verify::cmd_verify(trials, cli.seed, out.as_deref()),
        Command::Bench { config, out } => bench::cmd_bench(config.as_deref(), out.as_deref(), cli.seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
