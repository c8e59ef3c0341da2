//! Batch driver: dataset synthesis, LM pretraining, mapper training,
//! generation, and evaluation. Exit codes: 0 success, 1 operational error,
//! 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prefix_bridge::trainer::TrainMode;

#[derive(Parser)]
#[command(name = "pfxbridge", version, about = "Embedding-conditioned report generation")]
struct Cli {
    /// JSON config file; values can be overridden with --section.key=value
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL files)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
    },
    /// Pretrain the language model on report texts and write a checkpoint
    #[command(name = "pretrain-lm")]
    PretrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
    /// Train the mapper (and optionally the LM) on embedding-report pairs
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
    },
    /// Decode reports for a JSONL file of embedding records
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long = "max-len")]
        max_len: Option<usize>,
    },
    /// Score the test split of a dataset against a trained checkpoint
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "prefix" => Ok(TrainMode::PrefixTuning),
        "finetune" => Ok(TrainMode::FineTuning),
        other => Err(format!("unknown mode {other:?}, expected prefix or finetune")),
    }
}

fn run() -> prefix_bridge::Result<()> {
    let (args, overrides) = config::split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let cfg = config::parse_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            train,
            val,
            test,
        } => commands::cmd_synth(&cfg, &out, seed, train, val, test),
        Command::PretrainLm { data, out, epochs } => {
            commands::cmd_pretrain_lm(&cfg, &data, &out, epochs)
        }
        Command::Train {
            data,
            lm,
            out,
            mode,
        } => commands::cmd_train(&cfg, &data, &lm, &out, mode),
        Command::Generate {
            ckpt,
            input,
            out,
            beam,
            max_len,
        } => commands::cmd_generate(&cfg, &ckpt, &input, &out, beam, max_len),
        Command::Evaluate { ckpt, data, out } => commands::cmd_evaluate(&cfg, &ckpt, &data, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
