//! `mcddpm` command-line driver.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 unreadable
//! or malformed data (including checkpoints), 4 numerical failure in training.

mod commands;
mod options;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use options::{EvalArgs, InferArgs, PhantomArgs, TrainArgs};

/// Directory under which relative output paths are resolved.
pub const OUTPUT_ROOT_ENV: &str = "MCDDPM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "mcddpm", version, about = "Conditioned diffusion anomaly detection on brain volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Reconstruct one volume and export its anomaly maps.
    Infer(InferArgs),
}

#[derive(Debug)]
pub enum CliError {
    Argument(String),
    Core(mcddpm::Error),
}

impl From<mcddpm::Error> for CliError {
    fn from(e: mcddpm::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use mcddpm::Error as E;
        match self {
            CliError::Argument(_) | CliError::Core(E::InvalidArgument(_)) => 2,
            CliError::Core(E::Numerical(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Argument(m) => write!(f, "invalid argument: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
