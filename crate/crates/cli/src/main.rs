//! `transip`: generate data, train, evaluate and probe TransIP models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transip::train::Mode;

use crate::config::parse_tagged;

#[derive(Parser, Debug)]
#[command(name = "transip", version, about = "Transformer interatomic potentials with latent equivariance")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, training and probes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Validate inputs and report what would run, without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled Lennard-Jones dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model in transip or transaug mode.
    Train(TrainArgs),
    /// Accuracy metrics and probes for checkpoints on tagged datasets.
    Eval(EvalArgs),
    /// Equivariance probes only.
    Probe(EvalArgs),
    /// Collect training logs and metric tables into plot-ready CSV files.
    ExportPlotData(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub atoms_min: Option<usize>,
    #[arg(long)]
    pub atoms_max: Option<usize>,
    /// Comma-separated atomic numbers.
    #[arg(long, value_delimiter = ',')]
    pub palette: Option<Vec<u32>>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training set (JSON Lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_max_tokens: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint as NAME=PATH or PATH (named by file stem). Repeatable.
    #[arg(long = "checkpoint", required = true, value_parser = parse_tagged)]
    pub checkpoints: Vec<(String, PathBuf)>,
    /// Dataset as TAG=PATH or PATH (tagged by file stem). Repeatable.
    #[arg(long = "data", value_parser = parse_tagged)]
    pub data: Vec<(String, PathBuf)>,
    /// Random rotations per molecule.
    #[arg(long)]
    pub rotations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Training output directory as NAME=DIR or DIR. Repeatable.
    #[arg(long = "run", value_parser = parse_tagged)]
    pub runs: Vec<(String, PathBuf)>,
    /// Metric CSV written by `eval`. Repeatable.
    #[arg(long = "metrics")]
    pub metrics: Vec<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: transip::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
