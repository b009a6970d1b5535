//! The `corrseg` pipeline: synthesize oracle data, train a segmentation head
//! on feature files, infer masks and evaluate them.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "corrseg", version, about = "Unsupervised segmentation by correspondence distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic feature maps, ground-truth masks, palette and manifest.
    Synth(CommonArgs),
    /// Train the head and write a checkpoint plus training log.
    Train(CommonArgs),
    /// Predict masks for the inference split.
    Infer(CommonArgs),
    /// Score predicted masks against ground truth.
    Eval(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Synth(a) | Command::Train(a) | Command::Infer(a) | Command::Eval(a) => a,
        }
    }
}

/// Executes one subcommand, returning the summary meant for stdout.
pub fn run(command: &Command) -> Result<String, CliError> {
    let args = command.args();
    let cfg = RunConfig::load(&args.config, args.seed, args.out.as_deref())?;
    log::debug!("config digest {}", cfg.digest());
    match command {
        Command::Synth(_) => commands::synth::run(&cfg),
        Command::Train(_) => commands::train::run(&cfg),
        Command::Infer(_) => commands::infer::run(&cfg),
        Command::Eval(_) => commands::eval::run(&cfg),
    }
}
