//! `amcf`: train, evaluate and explain AMCF recommenders from a config file.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training
//! aborted, 4 checkpoint/manifest mismatch, 5 unknown id.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use amcf::model::{AttentionMode, MaskMode};
use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training aborted: {0}")]
    TrainAbort(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    UnknownId(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) | Self::Io(_) => 2,
            Self::TrainAbort(_) => 3,
            Self::Mismatch(_) => 4,
            Self::UnknownId(_) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "amcf", version, about = "Attentive multitask collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write model.json, history.csv and manifest.json
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Score a checkpoint against AMCF, LR and random rows; writes eval.json and eval.csv
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Print a user's aspect preferences as CSV, optionally for one item
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw user id as it appears in the rating log
        #[arg(long)]
        user: u64,
        /// Raw item id; prints the item's aspects and the predicted rating
        #[arg(long)]
        item: Option<u64>,
    },
    /// Merge evaluation CSVs and append per-model means
    Report {
        /// eval.csv files with identical headers
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct OverrideArgs {
    /// Seed for both the split and training
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// softmax or linear
    #[arg(long)]
    attn_mode: Option<AttentionMode>,
    /// masked or unmasked
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    /// Let the interpretation loss update item embeddings
    #[arg(long)]
    no_shield: bool,
    /// Output directory; overrides [output] dir
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Self {
            seed: a.seed,
            lambda: a.lambda,
            dim: a.dim,
            attn_mode: a.attn_mode,
            mask_mode: a.mask_mode,
            no_shield: a.no_shield,
            output: a.out,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, overrides } => commands::train(&RunConfig::load(&config, &overrides.into())?),
        Command::Evaluate { config, checkpoint, overrides } => {
            commands::evaluate(&RunConfig::load(&config, &overrides.into())?, &checkpoint)
        }
        Command::Explain { checkpoint, user, item } => commands::explain(&checkpoint, user, item),
        Command::Report { inputs, out } => commands::report(&inputs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("amcf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
