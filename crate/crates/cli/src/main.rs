//! `adseal`: generate synthetic logs, train in local or cloud mode, evaluate
//! against baselines, audit the privacy ledger and replay logged metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use adseal::privacy::Topology;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{Exit, Failure, OrExit};
use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "adseal", version, about = "Privacy-preserving ad recommendation pipeline")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Artifact directory (default: ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Slate size.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Local,
    Cloud,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic users, catalog and train/test logs.
    Gen,
    /// Train the model through the privacy boundary; writes checkpoint and ledger.
    Train,
    /// Compare the trained model with random, content-based and CF baselines.
    Evaluate,
    /// Leakage metrics for the ledger written by `train`.
    Audit,
    /// CTR and CR of a logged JSONL file (default: the bundled example log).
    Replay { log: Option<PathBuf> },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            Mode::Local => Topology::Local,
            Mode::Cloud => Topology::Cloud,
        }),
        out: cli.out,
        k: cli.k,
    };
    let config = RunConfig::load(cli.config.as_deref(), &overrides).or_exit(Exit::Usage)?;
    match cli.command {
        Command::Gen => commands::gen(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate => commands::evaluate(&config),
        Command::Audit => commands::audit(&config),
        Command::Replay { log } => commands::replay(&config, log.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Exit::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}
