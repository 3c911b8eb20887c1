//! Command-line pipeline: corpus generation, pretraining, fine-tuning,
//! evaluation, explanation and sweeps.

pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use medkg::config::{RunConfig, DATA_DIR_ENV};
use medkg::Error;

pub use pipeline::Dirs;

#[derive(Debug, Parser)]
#[command(name = "medkg", version, about = "Knowledge-graph pretraining for EHR visit sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus, splits, vocabulary and edge list.
    Generate(Common),
    /// Pretrain the concept embedder and visit encoder.
    Pretrain(Common),
    /// Fine-tune the configured task from the pretraining checkpoint.
    Finetune(Common),
    /// Evaluate the fine-tuned task model on the test split.
    Evaluate(Common),
    /// Attention entropy, concept rankings, edge-mask explanations and masking curves.
    Explain(Common),
    /// Readmission-horizon or sum-loss-weight sweeps.
    Sweep(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Directory holding the corpus; defaults to the run directory.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: Option<PathBuf>,
    /// `section.key=value` config overrides, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn load(&self) -> medkg::Result<(RunConfig, Dirs)> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?.resolve();
        let data = self.data.clone().unwrap_or_else(|| self.out.clone());
        Ok((cfg, Dirs::new(data, self.out.clone())))
    }
}

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Missing(_) => EXIT_MISSING,
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Incompatible(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_OTHER,
    }
}

type CommandFn = fn(&RunConfig, &Dirs) -> medkg::Result<pipeline::Manifest>;

pub fn run(cli: &Cli) -> medkg::Result<pipeline::Manifest> {
    let (common, f): (&Common, CommandFn) = match &cli.command {
        Command::Generate(c) => (c, pipeline::cmd_generate),
        Command::Pretrain(c) => (c, pipeline::cmd_pretrain),
        Command::Finetune(c) => (c, pipeline::cmd_finetune),
        Command::Evaluate(c) => (c, pipeline::cmd_evaluate),
        Command::Explain(c) => (c, pipeline::cmd_explain),
        Command::Sweep(c) => (c, pipeline::cmd_sweep),
    };
    let (cfg, dirs) = common.load()?;
    f(&cfg, &dirs)
}
