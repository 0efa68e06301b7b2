//! `reflectiva` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

pub const EXIT_MISCONFIGURED: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "reflectiva", version, about = "Reflective retrieval-augmented visual question answering")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical CPU count).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Mock backend script (JSON).
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Remote backend URL; overrides REFLECTIVA_ENDPOINT and the config file.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Knowledge base JSONL.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    /// Prebuilt document index.
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Query samples JSONL.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Relative tolerance for numeric answers.
    #[arg(long, global = true)]
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a knowledge base and print its statistics.
    Ingest(commands::IngestArgs),
    /// Build a document index.
    Index(commands::IndexArgs),
    /// Answer one sample and write its trace.
    Answer(commands::AnswerArgs),
    /// Run the pipeline over a dataset and score it.
    Eval(commands::EvalArgs),
    /// Build fine-tuning data.
    Mine(commands::MineArgs),
    /// Accuracy over a grid of retrieved documents × kept passages.
    RerankSweep(commands::SweepArgs),
    /// Accuracy of the reflective tokens against a labeled suite.
    TokenAcc(commands::TokenAccArgs),
    /// Generate a synthetic knowledge base, dataset and mock script.
    Synth(commands::SynthArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_MISCONFIGURED, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn partial(message: impl Into<String>) -> Self {
        Self { code: EXIT_PARTIAL, message: message.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
