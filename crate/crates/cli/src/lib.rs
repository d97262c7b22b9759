//! Command-line pipeline: synthetic data, corruption dumps, pretraining,
//! fine-tuning, evaluation and the noise-density sweep.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "xt2t", version, about = "Cross-lingual text-to-text pretraining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a cipher-language corpus with gold alignments and a vocabulary.
    GenData(RunArgs),
    /// Dump corrupted training examples (SC, MT, TPSC or TSC) as JSON lines.
    Corrupt(RunArgs),
    /// Joint pretraining: span corruption plus an optional cross-lingual task.
    Pretrain(RunArgs),
    /// Text-to-text fine-tuning on a JSON-lines task file.
    Finetune(RunArgs),
    /// Retrieval, alignment and task metrics for a checkpoint.
    Eval(RunArgs),
    /// Pretrain and evaluate once per noise density.
    SweepNoise(RunArgs),
}

pub fn run(cli: Cli) -> xt2t::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Corrupt(a) => commands::corrupt(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SweepNoise(a) => commands::sweep_noise(&a),
    }
}
