//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 corrupt artifact,
//! 4 numeric failure during training or sampling.

mod ablate;
mod classify;
mod config;
mod expand;
mod sample;
mod toy;
mod train;

use clap::{Parser, Subcommand};
use geca_core::GecaError;

#[derive(Parser)]
#[command(
    name = "geca",
    about = "Generative cellular automata: train, sample, ablate, expand, classify",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the cellular rule with the diffusion objective.
    Train(train::TrainArgs),
    /// Generate images from a checkpoint (single M or an M sweep).
    Sample(sample::SampleArgs),
    /// Score all four inheritance modes against a real dataset with MMD.
    Ablate(ablate::AblateArgs),
    /// Synthesize a k-fold expansion of a labeled dataset.
    Expand(expand::ExpandArgs),
    /// Train/evaluate the downstream classifier (baseline vs augmented).
    Classify(classify::ClassifyArgs),
    /// Generate the procedural multi-label toy dataset.
    MakeToy(toy::MakeToyArgs),
}

fn exit_code(err: &GecaError) -> i32 {
    match err {
        GecaError::Corrupt(_) => 3,
        GecaError::Training(_) | GecaError::Sampling { .. } => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train::run(args),
        Command::Sample(args) => sample::run(args),
        Command::Ablate(args) => ablate::run(args),
        Command::Expand(args) => expand::run(args),
        Command::Classify(args) => classify::run(args),
        Command::MakeToy(args) => toy::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
