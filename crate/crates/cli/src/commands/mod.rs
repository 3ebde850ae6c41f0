mod analyze;
mod evaluate;
mod generate;
mod train;

use std::collections::BTreeSet;
use std::path::PathBuf;

use selab_core::numerics::derive_seed;
use selab_core::selectors::{SelectorParams, Strategy};
use selab_core::tasks::{read_manifest, read_store, EpisodeSplit, ItemStore};

use crate::artifacts::{self, check_dataset, Workspace, DATASET_FILE, MANIFESTS};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub use analyze::run as analyze;
pub use evaluate::run as evaluate;
pub use generate::run as generate;
pub use train::run as train;

const STAGE_GENERATE: u64 = 1;
const STAGE_SPLIT: u64 = 2;
const STAGE_TRAIN: u64 = 3;
const STAGE_EVALUATE: u64 = 4;
const STAGE_ANALYZE: u64 = 5;

pub const GENERATE_META: &str = "dataset/generate.meta.json";
pub const EVAL_META: &str = "eval/evaluate.meta.json";
pub const REWARDS_JSON: &str = "eval/rewards.json";
pub const CONTROL_LABEL: &str = "random_control";

/// Settings shared by every command after flag overrides.
pub struct Context {
    pub config: RunConfig,
    pub root: PathBuf,
    pub force: bool,
}

impl Context {
    fn workspace(&self) -> Workspace {
        Workspace::new(self.root.clone(), self.force)
    }

    fn seed(&self, stage: u64) -> u64 {
        derive_seed(self.config.seed, &[stage])
    }
}

fn strategy_index(s: Strategy) -> u64 {
    Strategy::ALL.iter().position(|&x| x == s).expect("listed strategy") as u64
}

pub fn checkpoint_rel(strategy: Strategy, kind: &str) -> String {
    format!("{}/{}.{}.selw", artifacts::CHECKPOINT_DIR, strategy.name(), kind)
}

pub fn train_meta_rel(strategy: Strategy) -> String {
    format!("{}/{}.train.meta.json", artifacts::CHECKPOINT_DIR, strategy.name())
}

struct Dataset {
    store: ItemStore,
    split: EpisodeSplit,
    hash: String,
}

/// Loads the generated dataset, checking it against its meta sidecar.
fn load_dataset(ws: &mut Workspace, config: &RunConfig) -> Result<Dataset> {
    let store_path = ws.input(DATASET_FILE)?;
    let bytes = std::fs::read(&store_path)?;
    let store = read_store(&bytes, &store_path.display().to_string())?;
    let mut parts = Vec::with_capacity(3);
    for rel in MANIFESTS {
        parts.push(read_manifest(ws.input(rel)?)?);
    }
    let hash = artifacts::dataset_hash(&ws.path(""))?;
    let meta_path = ws.input(GENERATE_META)?;
    check_dataset(&artifacts::read_meta(&meta_path)?, &meta_path, &hash)?;
    let meta_test = parts.pop().expect("three manifests");
    let meta_val = parts.pop().expect("three manifests");
    let meta_train = parts.pop().expect("three manifests");
    let holdout_conditions: BTreeSet<u32> = config.split.holdout_conditions.iter().copied().collect();
    for t in meta_train.iter().chain(&meta_val).chain(&meta_test) {
        if t.holdout != holdout_conditions.contains(&t.condition) {
            return Err(CliError::Data(format!(
                "task {} disagrees with the configured holdout conditions",
                t.task_id
            )));
        }
    }
    Ok(Dataset {
        store,
        split: EpisodeSplit {
            meta_train,
            meta_val,
            meta_test,
            holdout_conditions,
        },
        hash,
    })
}

/// Loads a trained checkpoint made from the current dataset.
fn load_checkpoint(ws: &mut Workspace, strategy: Strategy, kind: &str, dataset_hash: &str) -> Result<SelectorParams> {
    let rel = checkpoint_rel(strategy, kind);
    let path = ws.path(&rel);
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "missing checkpoint {} (run `selctl train --strategy {}` first)",
            path.display(),
            strategy
        )));
    }
    let meta_path = ws.input(&train_meta_rel(strategy))?;
    let meta = artifacts::read_meta(&meta_path)?;
    check_dataset(&meta, &meta_path, dataset_hash)?;
    ws.input(&rel)?;
    if meta.outputs.get(&rel).map(String::as_str) != ws.input_hash(&rel) {
        return Err(CliError::Data(format!(
            "{} does not match the hash recorded by its training run",
            path.display()
        )));
    }
    let bytes = std::fs::read(&path)?;
    Ok(SelectorParams::read_checkpoint(&bytes, &path.display().to_string())?)
}

fn check_budget(ks: &[usize], split: &EpisodeSplit) -> Result<()> {
    let smallest = split.meta_test.iter().map(|t| t.pool.len()).min().unwrap_or(0);
    match ks.iter().find(|&&k| k > smallest) {
        Some(k) => Err(CliError::Config(format!(
            "budget k = {k} exceeds the smallest test pool ({smallest} items)"
        ))),
        None => Ok(()),
    }
}
