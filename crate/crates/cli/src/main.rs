//! `tokenring`: identities, simulation runs, experiment sweeps, run audits
//! and channel-trace comparison.
//!
//! Exit codes: 0 success or pass, 1 protocol or verification failure,
//! 2 usage, configuration or I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tokenring::experiments::ExperimentName;

#[derive(Parser, Debug)]
#[command(name = "tokenring", version, about = "Token-ring smart-home command delivery simulator")]
pub struct Cli {
    /// Seed for every random choice; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Simulation config (run) or experiment spec (bench), as JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run nodes as threads with real timers and real squarings (small
    /// single rings only).
    #[arg(long, global = true)]
    pub wall_clock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate owner, hub and device identities, one JSON file each.
    Keygen {
        /// Device ids, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "D1,D2,D3")]
        devices: Vec<String>,
    },
    /// Run a simulation and write traces, round tables and summaries.
    Run,
    /// Run an experiment sweep and write a metrics table.
    Bench {
        /// Experiment to run with default parameters (ignored with --config).
        experiment: Option<Experiment>,
    },
    /// Audit a run directory: exit 0 iff every execution checks out.
    Verify {
        /// Directory written by `run` (defaults to --out).
        run_dir: Option<PathBuf>,
        /// Owner state with the trapdoor (defaults to <run_dir>/owner_state.json).
        #[arg(long)]
        owner: Option<PathBuf>,
    },
    /// Compare an active and an idle channel trace.
    Observe {
        active: PathBuf,
        idle: PathBuf,
        #[arg(long, default_value_t = 1000)]
        window_ms: u64,
        /// Span of both traces; taken from summary.json beside the traces,
        /// or from the last event, when absent.
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long, default_value_t = tokenring::observer::DEFAULT_KS_THRESHOLD)]
        ks_threshold: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Experiment {
    Decouple,
    Latency,
    TokenLength,
    ParallelRings,
    Skew,
}

impl From<Experiment> for ExperimentName {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::Decouple => ExperimentName::Decouple,
            Experiment::Latency => ExperimentName::Latency,
            Experiment::TokenLength => ExperimentName::TokenLength,
            Experiment::ParallelRings => ExperimentName::ParallelRings,
            Experiment::Skew => ExperimentName::Skew,
        }
    }
}

/// Why a subcommand did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// The protocol check ran and said no.
    Rejected(String),
    /// Bad input, bad config or an I/O problem.
    Usage(String),
}

impl Failure {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Rejected(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
