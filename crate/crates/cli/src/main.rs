mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use gmrl_core::{ErrorKind, GmrlError};

use crate::config::schema_help;

#[derive(Debug, Parser)]
#[command(name = "gmrl", version, about = "Train, evaluate and inspect GMRL tensor time series forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory of the run directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides train.seed (data.synth.seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Variants trained concurrently by `ablate`; 1 is the deterministic reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Ablation variant applied to the configured model, or a comma-separated
    /// suite for `ablate`.
    #[arg(long, global = true)]
    pub variant: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history, reports and diagnostics.
    Train,
    /// Score a checkpoint on the validation and test ranges.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast the steps after the last input window of a dataset file.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose last `input_len` steps form the window; defaults
        /// to the configured data.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the synthetic dataset described by data.synth plus its labels.
    Synth,
    /// Compare analytic gradients with finite differences on a random batch.
    Gradcheck,
    /// Train every variant of the ablation suite on identical data.
    Ablate,
}

fn exit_code(e: &GmrlError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_long_help(schema_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
