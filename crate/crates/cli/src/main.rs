//! `agdmpc` experiment runner.
//!
//! Exit codes: 0 success, 1 check failure, 2 invalid input, 3 runtime divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Diverged(String),
    #[error("cannot write output {0}")]
    Output(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Invalid(_) | CliError::Output(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<agdmpc::Error> for CliError {
    fn from(e: agdmpc::Error) -> Self {
        match e {
            agdmpc::Error::Divergence { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Agd,
    Ddp,
}

#[derive(Debug, Parser)]
#[command(name = "agdmpc", version, about = "ADAM and DDP trajectory optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Open-loop solve; writes trajectory.csv and convergence.csv.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "agd")]
        solver: Solver,
    },
    /// Closed-loop run; writes mpc_log.csv, mpc_timing.csv and summary.json.
    Mpc {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "agd")]
        solver: Solver,
        /// Inject the config's disturbance events.
        #[arg(long)]
        disturb: bool,
    },
    /// Adjoint and cost derivatives against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
    /// Per-iteration timing across horizons; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending horizons, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { common, solver } => commands::solve(&common, solver),
        Command::Mpc { common, solver, disturb } => commands::mpc(&common, solver, disturb),
        Command::Gradcheck { common, corrupt_jacobian } => commands::gradcheck(&common, corrupt_jacobian),
        Command::Bench { common, horizons } => commands::bench(&common, &horizons),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
