//! `radiomamba`: synthetic data, training, inference, evaluation and
//! self-checks for RadioMamba models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.

mod bench;
mod config;
mod eval;
mod gradcheck;
mod infer;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radiomamba_core::Error;

#[derive(Parser)]
#[command(
    name = "radiomamba",
    version,
    about = "Radio map construction with a selective state-space U-Net"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write a deterministic synthetic dataset
    Synth(synth::Args),
    /// Train a model on a dataset
    Train(train::Args),
    /// Predict radio maps for a directory of environments
    Infer(infer::Args),
    /// Score a checkpoint or saved predictions on a dataset split
    Eval(eval::Args),
    /// Run the 64-bit finite-difference gradient checks
    Gradcheck(gradcheck::Args),
    /// Time the selective scan across sequence lengths
    Bench(bench::Args),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Domain(_) | Error::Graph(_) => 2,
        Error::Data { .. } | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
