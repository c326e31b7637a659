//! `isnn`: dataset generation, training, verification suites, derivative
//! benchmarks, gating discovery and inverse design.
//!
//! Exit codes: 0 success, 1 a property or acceptance check failed, 2 invalid
//! configuration, 3 file input/output error.

mod commands;
mod config;
mod data;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Why a command stopped; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Config(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<isnn::Error> for Failure {
    fn from(e: isnn::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "isnn", version, about = "Input specific neural networks for hyperelastic modeling")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset CSV with a metadata sidecar
    Gen(commands::GenArgs),
    /// Train a network on a dataset for several seeds
    Train(commands::TrainArgs),
    /// Run the constraint and derivative property suites
    Verify(commands::VerifyArgs),
    /// Time manual derivatives against tape derivatives
    Bench(commands::BenchArgs),
    /// Train a gated model and report which branch survives
    Gate(commands::GateArgs),
    /// Recover design parameters from target stresses
    Invert(commands::InvertArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gate(a) => commands::gate(a),
        Command::Invert(a) => commands::invert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
