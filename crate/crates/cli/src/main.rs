//! `selctl`: generate a synthetic benchmark, meta-train selectors, evaluate
//! them and analyze what they pick.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use log::error;
use selab_core::selectors::Strategy;

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "selctl", version, about = "Selective-labeling experiments from the command line")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to the number of cores). Outputs do not
    /// depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Work directory holding every stage's inputs and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the item store and the train/val/test task manifests.
    Generate,
    /// Meta-train a selector with REINFORCE.
    Train {
        /// medselect or clinical.
        #[arg(long, default_value = "medselect")]
        strategy: String,
        /// Overrides train.epochs; 0 writes the initialization as checkpoint.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides train.k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Per-task test AUROC for each strategy and budget.
    Evaluate {
        /// Comma-separated strategies, overriding evaluate.strategies.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        /// Comma-separated budgets, overriding evaluate.k.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Bootstrap intervals, composition tests and distribution distances.
    Analyze {
        /// Comma-separated budgets to profile, overriding analyze.k.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
}

fn parse_strategies(names: &[String]) -> Result<Vec<Strategy>> {
    names
        .iter()
        .map(|n| Strategy::from_str(n.trim()).map_err(CliError::from))
        .collect()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut value: serde_json::Value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Config("the configuration must be a JSON object".into()))?;
    if let Some(seed) = cli.seed {
        obj.insert("seed".into(), seed.into());
    }
    let origin = cli
        .config
        .as_ref()
        .map_or("configuration".to_string(), |p| p.display().to_string());
    let mut config = RunConfig::parse(&value.to_string(), &origin)?;
    match &cli.command {
        Command::Generate => {}
        Command::Train { epochs, k, .. } => {
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
            if let Some(k) = k {
                config.train.k = *k;
            }
        }
        Command::Evaluate { strategy, k } => {
            if !strategy.is_empty() {
                config.evaluate.strategies = parse_strategies(strategy)?;
            }
            if !k.is_empty() {
                config.evaluate.k = k.clone();
            }
        }
        Command::Analyze { k } => {
            if !k.is_empty() {
                config.analyze.k = k.clone();
            }
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let config = load_config(&cli)?;
    let root = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| CliError::Config("no work directory: pass --out or set out_dir".into()))?;
    let ctx = Context {
        config,
        root,
        force: cli.force,
    };
    match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train { strategy, .. } => commands::train(&ctx, Strategy::from_str(strategy)?),
        Command::Evaluate { .. } => commands::evaluate(&ctx),
        Command::Analyze { .. } => commands::analyze(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SELCTL_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("selctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
