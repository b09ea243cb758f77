//! `stabprune` command line: train, prune, analyze, eval and ablate.
//!
//! Every verb resolves a [`RunConfig`] from defaults, an optional TOML file
//! and flags, writes it as `config.resolved.toml` into the output directory,
//! and returns a typed [`Outcome`] so the commands can also be driven in-process.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stabprune::nn::AuxForm;
use stabprune::pruner::Criterion;

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Outcome};
pub use config::{FileConfig, FlagOverrides, Primary, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "stabprune", version, about = "Stability-based structured filter pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from scratch (or continue from --checkpoint) with the data loss.
    Train(Common),
    /// Iteratively perturb, rank, cut and fine-tune a trained checkpoint.
    Prune(Common),
    /// Per-layer FLOPS, parameters and memory of an architecture or checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Architecture name, architecture file or checkpoint to compare against.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Accuracy and confusion counts of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Which split of the dataset to score.
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Accuracy after cutting k filters of one conv layer, without fine-tuning.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// 0-based conv layer index.
        #[arg(long)]
        layer: Option<usize>,
        /// Comma-separated filter counts.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Comma-separated seeds for the perturbation and random arms.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in architecture name or architecture file.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// MNIST directory, or `synth[:N]` for a generated dataset.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs of the command's main phase (train, fine-tune, or perturbation for ablate).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate of the command's main phase.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the auxiliary penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Batch size; analyze takes a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    /// `targets:W1,W2,...` or `counts:P1,P2;P1,P2;...`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, value_parser = parse_criterion)]
    pub criterion: Option<Criterion>,
    #[arg(long, value_parser = parse_aux_form)]
    pub aux_form: Option<AuxForm>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: stabprune::Error| e.to_string())
}

fn parse_aux_form(s: &str) -> Result<AuxForm, String> {
    s.parse().map_err(|e: stabprune::Error| e.to_string())
}

impl Common {
    pub fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            seed: self.seed,
            arch: self.arch.clone(),
            checkpoint: self.checkpoint.clone(),
            data: self.data.clone(),
            out: self.out.clone(),
            limit: self.limit,
            test_limit: self.test_limit,
            epochs: self.epochs,
            lr: self.lr,
            lambda: self.lambda,
            batch: self.batch.clone(),
            schedule: self.schedule.clone(),
            criterion: self.criterion,
            aux_form: self.aux_form,
            ..Default::default()
        }
    }
}
