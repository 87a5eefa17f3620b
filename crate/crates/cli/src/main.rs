use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use modnas::config::RunConfig;
use modnas::pipeline::{self, Ctx};

#[derive(Parser)]
#[command(name = "modnas", about = "Modular knowledge-inherited architecture search")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Rng seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for candidate evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the n seed architectures and save their weights + metrics.
    TrainSeeds,
    /// Decompose the trained seeds into the frozen module bank.
    BuildKb,
    /// Run the evolutionary search over the module bank.
    Search,
    /// Fine-tune the searched genotypes end to end and rank them.
    Finetune,
    /// Summarize results: ranked table + score/error correlation.
    Report,
    /// Re-score the searched genotypes with trainable 1x1 adapters.
    AblateAdapters,
}

fn build_ctx(cli: &Cli) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set needs KEY=VALUE, got {kv:?}"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let workers = match cli.workers {
        Some(0) => anyhow::bail!("--workers must be >= 1"),
        Some(w) => w,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(Ctx { cfg, workers })
}

fn main() {
    let cli = Cli::parse();
    let run = || -> Result<()> {
        let ctx = build_ctx(&cli)?;
        match cli.command {
            Command::TrainSeeds => pipeline::cmd_train_seeds(&ctx),
            Command::BuildKb => pipeline::cmd_build_kb(&ctx),
            Command::Search => pipeline::cmd_search(&ctx),
            Command::Finetune => pipeline::cmd_finetune(&ctx),
            Command::Report => pipeline::cmd_report(&ctx),
            Command::AblateAdapters => pipeline::cmd_ablate(&ctx),
        }
    };
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
