//! File formats, run configuration and the `qbert` command line on top of
//! `qbert-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{extract_overrides, RunConfig};
pub use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "qbert", about = "Quaternion-factorized transformer text classifier")]
pub struct Cli {
    /// JSON run configuration; missing fields keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for outputs, and for inputs not given explicitly.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic labelled dataset and its raw corpus.
    GenData,
    /// Learn a subword vocabulary from the raw corpus.
    TrainTokenizer,
    /// Pair, tokenize and mask the raw corpus for pretraining.
    Prepare,
    Pretrain,
    Finetune {
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Use adversarial fine-tuning with a learned noise magnitude.
        #[arg(long)]
        adversarial: bool,
    },
    /// Score dev and test, pick the threshold on dev, report on test.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON lines with `text` and `source`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Formula and exact parameter counts for every factorization combination.
    CountParams {
        /// Use the 7.1M reference architecture instead of the configured one.
        #[arg(long)]
        reference: bool,
    },
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("qbert".to_string()).chain(rest)).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            print!("{e}");
            std::process::exit(0);
        }
        CliError::Usage(e.to_string())
    })?;
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    }
    .with_overrides(&overrides)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    match &cli.command {
        Command::Finetune { init, adversarial } => {
            if init.is_some() {
                config.finetune.init = init.clone();
            }
            config.finetune.adversarial |= adversarial;
        }
        Command::Evaluate { checkpoint } => {
            if checkpoint.is_some() {
                config.checkpoint = checkpoint.clone();
            }
        }
        Command::Predict { checkpoint, input } => {
            if checkpoint.is_some() {
                config.checkpoint = checkpoint.clone();
            }
            if input.is_some() {
                config.data.input = input.clone();
            }
        }
        _ => {}
    }
    config.validate()?;
    let ctx = Context { config, out: cli.out };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainTokenizer => commands::train_tokenizer(&ctx),
        Command::Prepare => commands::prepare(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Finetune { .. } => commands::finetune(&ctx),
        Command::Evaluate { .. } => commands::evaluate(&ctx),
        Command::Predict { .. } => commands::predict(&ctx),
        Command::CountParams { reference } => commands::count(&ctx, reference),
    }
}
