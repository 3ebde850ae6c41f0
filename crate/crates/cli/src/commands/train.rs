use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};

use log::{info, warn};
use selab_core::numerics::derive_seed;
use selab_core::selectors::Strategy;
use selab_core::trainer::{self, LogRecord};
use selab_core::Error as CoreError;
use serde_json::json;

use super::{checkpoint_rel, load_dataset, strategy_index, train_meta_rel, Context, STAGE_TRAIN};
use crate::artifacts::{self, CHECKPOINT_DIR};
use crate::error::{CliError, Result};

/// Meta-trains one strategy and writes its checkpoints, optimizer state
/// and training log.
pub fn run(ctx: &Context, strategy: Strategy) -> Result<()> {
    if !strategy.is_trainable() {
        return Err(CliError::Config(format!(
            "strategy {strategy} has no parameters to train (expected medselect or clinical)"
        )));
    }
    let cfg = &ctx.config;
    let mut ws = ctx.workspace();
    let name = strategy.name();
    let best_rel = checkpoint_rel(strategy, "best");
    let final_rel = checkpoint_rel(strategy, "final");
    let adam_rel = format!("{CHECKPOINT_DIR}/{name}.adam.sela");
    let log_rel = format!("{CHECKPOINT_DIR}/{name}.log.jsonl");
    let meta_rel = train_meta_rel(strategy);
    ws.claim(&[
        best_rel.clone(),
        final_rel.clone(),
        adam_rel.clone(),
        log_rel.clone(),
        meta_rel.clone(),
    ])?;

    let data = load_dataset(&mut ws, cfg)?;
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, &[STAGE_TRAIN, strategy_index(strategy)]);

    let mut log_file = BufWriter::new(File::create(ws.path(&log_rel))?);
    let sink = |rec: &LogRecord| -> selab_core::Result<()> {
        serde_json::to_writer(&mut log_file, rec)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        match (rec.mean_r, rec.val_reward) {
            (_, Some(v)) => info!("step {}: validation reward {v:.4}", rec.step),
            (Some(r), None) => log::debug!("step {}: mean reward {r:.4}", rec.step),
            _ => {}
        }
        Ok(())
    };
    let out = match trainer::train(&tc, &data.store, &data.split, strategy, sink) {
        Ok(out) => out,
        Err(CoreError::NumericalAbort { step, task_ids, params }) => {
            let dump_rel = format!("{CHECKPOINT_DIR}/{name}.abort.json");
            ws.write_json(&dump_rel, &json!({ "step": step, "task_ids": task_ids, "params": params }))?;
            warn!("diagnostic dump written to {}", ws.path(&dump_rel).display());
            return Err(CliError::Numerical(format!(
                "non-finite gradient at update {step}; see {}",
                ws.path(&dump_rel).display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    ws.record(&log_rel)?;

    let mut bytes = Vec::new();
    out.best.write_checkpoint(&mut bytes)?;
    ws.write(&best_rel, &bytes)?;
    bytes.clear();
    out.final_params.write_checkpoint(&mut bytes)?;
    ws.write(&final_rel, &bytes)?;
    bytes.clear();
    out.adam.write(&mut bytes)?;
    ws.write(&adam_rel, &bytes)?;
    info!(
        "{name}: best validation reward {} at update {}",
        out.best_val.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        out.best_step
    );

    let notes = BTreeMap::from([
        ("best_step".to_string(), json!(out.best_step)),
        ("best_val".to_string(), json!(out.best_val)),
        ("updates".to_string(), json!(out.final_params.version())),
        ("train_seed".to_string(), json!(tc.seed)),
    ]);
    ws.finish(&meta_rel, "train", Some(name), &artifacts::stamp(cfg, data.hash), notes)?;
    Ok(())
}
