use std::path::PathBuf;
use std::process::ExitCode;

use cardcount_cli::{run, Command, RunContext};
use clap::{Args, Parser, Subcommand};

/// Synthetic object counting: data generation, training and experiments.
#[derive(Parser)]
#[command(name = "cardcount", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train, validation and test corpora.
    GenData(Common),
    /// Run one training stage and save the best checkpoint.
    Train(Common),
    /// MAE and RMSE of a checkpoint on a corpus.
    Eval(Common),
    /// Count drift of checkpoints under downscaling.
    SizeBias(Common),
    /// Metrics across classification thresholds.
    ThresholdSweep(Common),
    /// Count-guided blob scene optimisation suite.
    Guide(Common),
    /// Train and compare ablation variants.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the seeds named in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::SizeBias(c) => (Command::SizeBias, c),
        Cmd::ThresholdSweep(c) => (Command::ThresholdSweep, c),
        Cmd::Guide(c) => (Command::Guide, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
    };
    let ctx = RunContext {
        config: common.config,
        seed: common.seed,
        out: common.out,
    };
    match run(command, &ctx) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
