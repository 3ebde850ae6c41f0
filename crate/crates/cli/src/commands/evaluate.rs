use std::collections::BTreeMap;

use log::info;
use selab_core::analysis::{evaluate_rewards, stream_seed, Group, RewardRecord, SelectorSource};
use selab_core::selectors::{SelectorParams, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_budget, load_checkpoint, load_dataset, Context, EVAL_META, REWARDS_JSON, STAGE_EVALUATE};
use crate::artifacts::{self, Stamp};
use crate::error::{CliError, Result};

pub const REWARDS_CSV: &str = "eval/rewards.csv";
pub const SUMMARY_CSV: &str = "eval/summary.csv";

#[derive(Debug, Serialize, Deserialize)]
pub struct RewardsFile {
    pub meta: Stamp,
    pub rewards: Vec<RewardRecord>,
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    k: usize,
    strategy: &'a str,
    group: Group,
    n_tasks: usize,
    mean_auroc: f64,
}

/// Loads the parameters of every trainable strategy in `strategies`.
pub(super) fn load_params(
    ctx: &Context,
    ws: &mut crate::artifacts::Workspace,
    strategies: &[Strategy],
    dataset_hash: &str,
) -> Result<BTreeMap<Strategy, SelectorParams>> {
    let kind = ctx.config.evaluate.checkpoint.name();
    let mut params = BTreeMap::new();
    for &s in strategies.iter().filter(|s| s.is_trainable()) {
        params.insert(s, load_checkpoint(ws, s, kind, dataset_hash)?);
    }
    Ok(params)
}

pub(super) fn check_strategies(strategies: &[Strategy]) -> Result<()> {
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(CliError::Config(format!("strategy {s} listed twice")));
        }
    }
    Ok(())
}

/// Test-split AUROC of every configured strategy at every budget.
pub fn run(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let ev = &cfg.evaluate;
    check_strategies(&ev.strategies)?;
    let mut ws = ctx.workspace();
    ws.claim(&[
        REWARDS_CSV.to_string(),
        REWARDS_JSON.to_string(),
        SUMMARY_CSV.to_string(),
        EVAL_META.to_string(),
    ])?;
    let data = load_dataset(&mut ws, cfg)?;
    check_budget(&ev.k, &data.split)?;
    let params = load_params(ctx, &mut ws, &ev.strategies, &data.hash)?;
    let seed = ctx.seed(STAGE_EVALUATE);

    let mut rewards = Vec::new();
    let mut summary = Vec::new();
    for &k in &ev.k {
        for &s in &ev.strategies {
            let source = SelectorSource {
                label: s.name(),
                strategy: s,
                params: params.get(&s),
                greedy: ev.greedy,
            };
            let recs = evaluate_rewards(&data.store, &data.split.meta_test, &source, k, stream_seed(seed, s.name(), k))?;
            for group in Group::ALL {
                let v: Vec<f64> = recs.iter().filter(|r| Group::of(r.holdout) == group).map(|r| r.reward).collect();
                if v.is_empty() {
                    continue;
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                info!("k = {k:>3} {:<10} {:<11} AUROC {mean:.4}", s.name(), group.name());
                summary.push((k, s, group, v.len(), mean));
            }
            rewards.extend(recs);
        }
    }

    let stamp = artifacts::stamp(cfg, data.hash.clone());
    ws.write_csv(REWARDS_CSV, &rewards)?;
    let rows: Vec<SummaryRow> = summary
        .iter()
        .map(|&(k, s, group, n_tasks, mean_auroc)| SummaryRow {
            k,
            strategy: s.name(),
            group,
            n_tasks,
            mean_auroc,
        })
        .collect();
    ws.write_csv(SUMMARY_CSV, &rows)?;
    ws.write_json(
        REWARDS_JSON,
        &RewardsFile {
            meta: stamp.clone(),
            rewards,
        },
    )?;
    let notes = BTreeMap::from([
        ("checkpoint".to_string(), json!(ev.checkpoint)),
        ("greedy".to_string(), json!(ev.greedy)),
    ]);
    ws.finish(EVAL_META, "evaluate", None, &stamp, notes)?;
    Ok(())
}
