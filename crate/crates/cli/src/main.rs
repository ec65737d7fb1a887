//! `aan`: synthesize corpora, build priors, train, evaluate, gradient-check
//! and export per-frame scores.
//!
//! Every command prints its resolved configuration as the first JSON line
//! on stdout; results follow as further JSON lines. Logs go to stderr.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// What a successful run concluded.
pub enum Outcome {
    Done,
    /// A check ran to completion and found a failure.
    CheckFailed,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<aan_core::Error>());
    match core {
        Some(aan_core::Error::NonFiniteLoss { .. } | aan_core::Error::NonFiniteGradient(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::BuildPrior(a) => commands::build_prior(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
