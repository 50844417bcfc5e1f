//! Command-line driver: solve the deceptive-control problem, roll out
//! shared-noise trajectories, and run the stealthiness search.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ModeArg;
use stealth_lqr::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Config(String),
    Io(std::io::Error),
    NoAdmissibleIntensity,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::NoAdmissibleIntensity => {
                write!(
                    f,
                    "no intensity on the grid satisfies the stealthiness constraint"
                )
            }
        }
    }
}

impl CliError {
    /// 2 validation, 3 numerical failure, 4 no admissible intensity.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::NoAdmissibleIntensity => 4,
            CliError::Core(e) => match e {
                Error::NotWellPosed { .. }
                | Error::IllConditioned { .. }
                | Error::NonFiniteRecursion { .. } => 3,
                Error::EmptyGrid => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "stealth-lqr",
    version,
    about = "Deceptive LQ control: solver, simulator, and stealthiness certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the backward recursions and dump the policy
    Solve {
        #[command(flatten)]
        args: CommonArgs,
        /// Extra path for the policy dump (in addition to <out>/policy.json)
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Roll out one shared-noise trajectory per intensity
    Simulate {
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Search the intensity grid for stealthy deception
    Stealth {
        #[command(flatten)]
        args: CommonArgs,
    },
}

#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config (JSON); the built-in demo problem when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default `out`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed for the noise substreams
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte-Carlo path count
    #[arg(long)]
    pub paths: Option<usize>,
    /// Comma-separated intensity list
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Comma-separated detection tolerance list
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Stealthiness metric: mc, bound, or both
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Attempt the solve even when the well-posedness condition fails
    #[arg(long)]
    pub force: bool,
    /// SPRT type-I error bound (default 0.01)
    #[arg(long)]
    pub alpha: Option<f64>,
    /// SPRT type-II error bound (default 0.01)
    #[arg(long)]
    pub beta: Option<f64>,
}

/// Caps the worker count from STEALTH_LQR_THREADS (0 or unset = automatic).
fn init_threads() {
    if let Ok(raw) = std::env::var("STEALTH_LQR_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(0) => {}
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            Err(_) => eprintln!("warning: ignoring invalid STEALTH_LQR_THREADS={raw}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { args, dump } => {
            let cfg = config::resolve(&args)?;
            commands::cmd_solve(&cfg, dump.as_deref())
        }
        Command::Simulate { args } => {
            let cfg = config::resolve(&args)?;
            commands::cmd_simulate(&cfg)
        }
        Command::Stealth { args } => {
            let cfg = config::resolve(&args)?;
            commands::cmd_stealth(&cfg)
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
