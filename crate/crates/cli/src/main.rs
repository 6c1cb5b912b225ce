//! `sjepa`: synthesize corpora, pre-train, fine-tune, run the pipeline grid
//! and report rankings.
//!
//! Exit codes: 0 on success, 2 for config or input errors, 3 when training
//! diverges.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<sjepa::Error> for CliError {
    fn from(e: sjepa::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sjepa", version, about = "Spatial masked pre-training for EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (TOML), or a manifest from an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Validate the config and inputs, then exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth(Common),
    /// Pre-train on a corpus.
    Pretrain(Common),
    /// Fine-tune and score one pipeline on one dataset.
    Finetune(Common),
    /// Run the pipeline grid, resuming an existing results file.
    Grid(Common),
    /// Rank pipelines from a results file.
    Report {
        /// Results CSV written by `grid` or `finetune`.
        results: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Synth(c) | Command::Pretrain(c) | Command::Finetune(c) | Command::Grid(c) => c,
        Command::Report { common, .. } => common,
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::Synth(c) => commands::synth(c),
        Command::Pretrain(c) => commands::pretrain(c),
        Command::Finetune(c) => commands::finetune(c),
        Command::Grid(c) => commands::grid(c),
        Command::Report { results, common } => commands::report(results, common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
