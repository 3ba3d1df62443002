//! `pfm`: run the pipeline stage by stage from a TOML experiment config.
//!
//! Stages read and write files under the config's output directory, so a
//! typical run is
//!
//! ```text
//! pfm make-dataset   --config configs/interpolation.toml
//! pfm distances      --config configs/interpolation.toml
//! pfm train-isometry --config configs/interpolation.toml
//! pfm evaluate       --config configs/interpolation.toml
//! ```
//!
//! `PFM_THREADS` caps the worker threads used for distance computations.

mod config;
mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use stages::Ctx;

#[derive(Parser)]
#[command(name = "pfm", version, about = "Isometric latent manifolds and pullback flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy)]
enum Stage {
    MakeDataset,
    Distances,
    TrainIsometry,
    TrainFlow,
    Generate,
    Evaluate,
    Analogue,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the dataset.
    MakeDataset(StageArgs),
    /// Compute the target distance matrix.
    Distances(StageArgs),
    /// Train the diffeomorphism.
    TrainIsometry(StageArgs),
    /// Train a generative flow.
    TrainFlow(StageArgs),
    /// Sample from the flow and export a trajectory.
    Generate(StageArgs),
    /// Ablation, interpolation and generation metrics.
    Evaluate(StageArgs),
    /// Analogue generation over the configured temperatures.
    Analogue(StageArgs),
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Stage, StageArgs) {
        match self {
            Command::MakeDataset(a) => (Stage::MakeDataset, a),
            Command::Distances(a) => (Stage::Distances, a),
            Command::TrainIsometry(a) => (Stage::TrainIsometry, a),
            Command::TrainFlow(a) => (Stage::TrainFlow, a),
            Command::Generate(a) => (Stage::Generate, a),
            Command::Evaluate(a) => (Stage::Evaluate, a),
            Command::Analogue(a) => (Stage::Analogue, a),
        }
    }
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::MakeDataset => "make-dataset",
            Stage::Distances => "distances",
            Stage::TrainIsometry => "train-isometry",
            Stage::TrainFlow => "train-flow",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Analogue => "analogue",
        }
    }

    fn run(self, ctx: &Ctx) -> Result<()> {
        match self {
            Stage::MakeDataset => stages::make_dataset(ctx),
            Stage::Distances => stages::distances(ctx),
            Stage::TrainIsometry => stages::train_isometry_stage(ctx),
            Stage::TrainFlow => stages::train_flow_stage(ctx),
            Stage::Generate => stages::generate(ctx),
            Stage::Evaluate => stages::evaluate(ctx),
            Stage::Analogue => stages::analogue(ctx),
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PFM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PFM_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads()?;
    let (stage, args) = cli.command.split();
    let (cfg, bytes) = ExperimentConfig::load(&args.config, args.seed, args.out)
        .with_context(|| format!("stage {} rejected the config", stage.name()))?;
    stages::ensure_out_dir(&cfg.out)?;
    let ctx = Ctx::new(cfg, &bytes);
    stage.run(&ctx).with_context(|| format!("stage {} failed", stage.name()))
}
