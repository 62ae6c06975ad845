//! Command-line workflows: corpus synthesis, MLM pretraining, cross-validated
//! finetuning, the prompt refute filter, ensembling, prediction and
//! evaluation.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptverify", version, about = "Prompt-aided claim verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the vocabulary and pretrain the encoder with masked-LM.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-validated finetuning; writes fold models and OOF predictions.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::Five)]
        stage: Stage,
    },
    /// Train or apply the prompt refute filter.
    PromptFilter {
        #[command(subcommand)]
        action: FilterAction,
    },
    /// Train the stacker or run a snapshot ensemble.
    Ensemble {
        #[command(subcommand)]
        action: EnsembleAction,
    },
    /// Predict categories: method 1 stacks 5-way models, method 2 filters
    /// Refute and then runs the 4-way models.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        method: u8,
        /// Defaults to the configured test set.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to `<output_dir>/predictions-method<N>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F1 report of predictions against gold labels.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// All five classes (method 1 base models).
    Five,
    /// The four non-Refute classes on non-Refute instances (method 2).
    Four,
}

#[derive(Debug, Subcommand)]
pub enum FilterAction {
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Writes `id,p_negative,decision`.
    Apply {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EnsembleAction {
    /// Fit the stacker on the 5-way OOF predictions.
    Stacker {
        #[arg(long)]
        config: PathBuf,
    },
    /// One cyclic-schedule finetuning pass; predicts with the mean of the
    /// cycle-end snapshots.
    Snapshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(commands::Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}
