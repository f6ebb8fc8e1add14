//! `ziqe`: synthetic ASR quality-estimation pipeline driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ziqe", about = "ASR quality estimation on synthetic speech")]
struct Cli {
    /// key=value configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "ziqe-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it as a dataset.
    Synth,
    /// Pretrain the backbone with the joint masked-LM + transcription loss.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Estimate the Beta precision from a dataset's nonzero labels.
    Fitphi {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Fine-tune a regression head on top of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict per-sample (lambda, mu, score) records.
    Predict {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predictions against a dataset's labels.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Finite-difference check of every layer and loss gradient.
    Gradcheck,
    /// Write per-layer cross-attention matrices for one sample.
    DumpAttention {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance id; defaults to the first sample.
        #[arg(long)]
        id: Option<String>,
    },
}

fn run(cli: Cli) -> ziqe::errors::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    match &cli.command {
        Command::Synth => {
            commands::cmd_synth(&cfg, out)?;
        }
        Command::Pretrain { dataset } => {
            commands::cmd_pretrain(&cfg, dataset, out)?;
        }
        Command::Fitphi { dataset } => {
            commands::cmd_fitphi(&cfg, dataset, out)?;
        }
        Command::Finetune {
            dataset,
            checkpoint,
        } => {
            commands::cmd_finetune(&cfg, dataset, checkpoint, out)?;
        }
        Command::Predict {
            dataset,
            checkpoint,
        } => {
            commands::cmd_predict(&cfg, dataset, checkpoint, out)?;
        }
        Command::Evaluate {
            dataset,
            predictions,
        } => {
            commands::cmd_evaluate(&cfg, predictions, dataset, out)?;
        }
        Command::Gradcheck => {
            commands::cmd_gradcheck()?;
        }
        Command::DumpAttention {
            dataset,
            checkpoint,
            id,
        } => {
            commands::cmd_dump_attention(&cfg, dataset, checkpoint, id.as_deref(), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
