//! `quantem`: run quantized-emulation experiments from TOML configurations.

mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "quantem", version, about = "Quantized-input emulation experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, conflicts_with = "recipe")]
    pub config: Option<PathBuf>,
    /// Built-in configuration, e.g. `fig3a`; see `quantem recipes`.
    #[arg(long, global = true)]
    pub recipe: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, global = true, env = "QUANTEM_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Receding-horizon integer MPC rollouts from every configured start.
    MpcRun,
    /// Generate MPC-labelled training and test datasets.
    Collect,
    /// Train the direction classifier on a collected dataset.
    TrainSupervised {
        /// Training data; defaults to `dataset_train.csv` in the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Roll out a trained classifier.
    SupervisedRollout {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a DQN agent.
    TrainDqn,
    /// Greedy rollouts of a trained DQN agent.
    DqnRollout {
        #[arg(long)]
        agent: Option<PathBuf>,
        /// Drop this many random channels at every step.
        #[arg(long)]
        dropout: Option<usize>,
    },
    /// Run a trained policy on the transformed reference system.
    TransferRollout {
        /// Trained agent (DQN) or classifier, depending on `transfer.policy`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare warm-started and freshly initialized training on a new system.
    WarmstartCompare {
        #[arg(long)]
        agent: Option<PathBuf>,
    },
    /// Render a rollout CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input path with an `.svg` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export the direction alphabet.
    Alphabet,
    /// List the built-in recipes.
    Recipes,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<quantem_core::Error> for CliError {
    fn from(e: quantem_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quantem: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
