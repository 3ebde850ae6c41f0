use std::collections::BTreeMap;

use log::info;
use selab_core::numerics::SeededRng;
use selab_core::tasks::{build_split, generate_synthetic_dataset, write_manifest, write_store, SplitKind};
use serde_json::json;

use super::{Context, GENERATE_META, STAGE_GENERATE, STAGE_SPLIT};
use crate::artifacts::{self, DATASET_FILE, MANIFESTS};
use crate::error::Result;

/// Synthesizes the item store and the three task manifests.
pub fn run(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let mut ws = ctx.workspace();
    let outputs: Vec<String> = std::iter::once(DATASET_FILE)
        .chain(MANIFESTS)
        .chain([GENERATE_META])
        .map(str::to_string)
        .collect();
    ws.claim(&outputs)?;

    let store = generate_synthetic_dataset(&cfg.synth, &mut SeededRng::new(ctx.seed(STAGE_GENERATE)))?;
    let split = build_split(&store, &cfg.split, &mut SeededRng::new(ctx.seed(STAGE_SPLIT)))?;
    info!("generated {} items, dimension {}", store.len(), store.dim());

    let mut bytes = Vec::new();
    write_store(&store, &mut bytes)?;
    ws.write(DATASET_FILE, &bytes)?;
    for (rel, kind) in MANIFESTS.into_iter().zip(SplitKind::ALL) {
        write_manifest(split.tasks(kind), ws.path(rel))?;
        ws.record(rel)?;
        info!("{}: {} tasks", kind.name(), split.tasks(kind).len());
    }

    let hash = artifacts::dataset_hash(&ws.path(""))?;
    let notes = BTreeMap::from([
        ("items".to_string(), json!(store.len())),
        (
            "tasks".to_string(),
            json!({
                "train": split.meta_train.len(),
                "val": split.meta_val.len(),
                "test": split.meta_test.len(),
            }),
        ),
    ]);
    ws.finish(GENERATE_META, "generate", None, &artifacts::stamp(cfg, hash), notes)?;
    Ok(())
}
