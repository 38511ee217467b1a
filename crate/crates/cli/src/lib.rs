//! Configuration files and subcommand runners behind the `cardcount`
//! binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{bail, Result};

pub use commands::RunContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    SizeBias,
    ThresholdSweep,
    Guide,
    Ablate,
}

/// Runs one subcommand and confirms that every artifact it declared was
/// written and is non-empty.
pub fn run(command: Command, ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let artifacts = match command {
        Command::GenData => commands::gen_data(ctx)?,
        Command::Train => commands::train(ctx)?,
        Command::Eval => commands::eval(ctx)?,
        Command::SizeBias => commands::size_bias(ctx)?,
        Command::ThresholdSweep => commands::threshold(ctx)?,
        Command::Guide => commands::guide(ctx)?,
        Command::Ablate => commands::ablate(ctx)?,
    };
    let missing: Vec<String> = artifacts
        .iter()
        .filter(|p| !p.metadata().is_ok_and(|m| m.is_file() && m.len() > 0))
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("declared artifacts missing or empty: {}", missing.join(", "));
    }
    Ok(artifacts)
}
