use std::collections::BTreeMap;

use log::info;
use selab_core::analysis::{
    compare, profile_selections, stream_seed, CompareConfig, ComparisonReport, Distribution, Group, SelectionProfile,
    SelectorSource,
};
use selab_core::selectors::Strategy;
use serde::Serialize;

use super::evaluate::{check_strategies, load_params, RewardsFile};
use super::{check_budget, load_dataset, Context, CONTROL_LABEL, EVAL_META, REWARDS_JSON, STAGE_ANALYZE, STAGE_EVALUATE};
use crate::artifacts::{self, check_dataset, Stamp};
use crate::error::{CliError, Result};

pub const REPORT_JSON: &str = "analysis/report.json";
pub const AUROC_CSV: &str = "analysis/auroc.csv";
pub const IMPROVEMENTS_CSV: &str = "analysis/improvements.csv";
pub const TTESTS_CSV: &str = "analysis/ttests.csv";
pub const WASSERSTEIN_CSV: &str = "analysis/wasserstein.csv";
pub const WASSERSTEIN_TASKS_CSV: &str = "analysis/wasserstein_per_task.csv";
pub const PROFILES_CSV: &str = "analysis/profiles.csv";
pub const ANALYZE_META: &str = "analysis/analyze.meta.json";

#[derive(Serialize)]
struct ReportFile<'a> {
    meta: &'a Stamp,
    compare: &'a CompareConfig,
    report: &'a ComparisonReport,
}

#[derive(Serialize)]
struct WassersteinSummary<'a> {
    k: usize,
    group: Group,
    distribution: Distribution,
    strategy: &'a str,
    reference: &'a str,
    n_tasks: usize,
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct WassersteinTask<'a> {
    k: usize,
    group: Group,
    distribution: Distribution,
    strategy: &'a str,
    task_index: usize,
    distance: f64,
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    k: usize,
    strategy: &'a str,
    task_id: u64,
    holdout: bool,
    frontal_fraction: f64,
    female_fraction: f64,
    mean_age: f64,
    pairwise_mean: Option<f64>,
    pairwise_max: Option<f64>,
}

/// Confidence intervals, composition tests and distribution distances
/// over the evaluated rewards and re-derived selections.
pub fn run(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let strategies = &cfg.evaluate.strategies;
    check_strategies(strategies)?;
    let mut ws = ctx.workspace();
    ws.claim(
        &[
            REPORT_JSON,
            AUROC_CSV,
            IMPROVEMENTS_CSV,
            TTESTS_CSV,
            WASSERSTEIN_CSV,
            WASSERSTEIN_TASKS_CSV,
            PROFILES_CSV,
            ANALYZE_META,
        ]
        .map(str::to_string),
    )?;
    let data = load_dataset(&mut ws, cfg)?;
    check_budget(&cfg.analyze.k, &data.split)?;

    let eval_meta_path = ws.input(EVAL_META)?;
    let eval_meta = artifacts::read_meta(&eval_meta_path)?;
    check_dataset(&eval_meta, &eval_meta_path, &data.hash)?;
    let rewards_path = ws.input(REWARDS_JSON)?;
    if eval_meta.outputs.get(REWARDS_JSON).map(String::as_str) != ws.input_hash(REWARDS_JSON) {
        return Err(CliError::Data(format!(
            "{} changed after evaluate wrote it",
            rewards_path.display()
        )));
    }
    let rewards: RewardsFile = serde_json::from_slice(&std::fs::read(&rewards_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", rewards_path.display())))?;
    if rewards.meta.dataset_hash != data.hash {
        return Err(CliError::Data(format!(
            "{} belongs to dataset {}",
            rewards_path.display(),
            rewards.meta.dataset_hash
        )));
    }

    let params = load_params(ctx, &mut ws, strategies, &data.hash)?;
    for (rel, hash) in &eval_meta.inputs {
        if rel.ends_with(".selw") && ws.input_hash(rel) != Some(hash.as_str()) {
            return Err(CliError::Data(format!(
                "{} differs from the checkpoint evaluate used",
                ws.path(rel).display()
            )));
        }
    }

    let eval_seed = ctx.seed(STAGE_EVALUATE);
    let mut sources: Vec<SelectorSource> = strategies
        .iter()
        .map(|&s| SelectorSource {
            label: s.name(),
            strategy: s,
            params: params.get(&s),
            greedy: cfg.evaluate.greedy,
        })
        .collect();
    if cfg.analyze.control && strategies.contains(&Strategy::Random) {
        sources.push(SelectorSource {
            label: CONTROL_LABEL,
            strategy: Strategy::Random,
            params: None,
            greedy: false,
        });
    }
    let mut profiles: Vec<SelectionProfile> = Vec::new();
    for &k in &cfg.analyze.k {
        for src in &sources {
            let seed = stream_seed(eval_seed, src.label, k);
            profiles.push(profile_selections(&data.store, &data.split.meta_test, src, k, seed)?);
        }
    }

    let compare_cfg = CompareConfig {
        bootstrap_resamples: cfg.analyze.bootstrap_resamples,
        confidence: cfg.analyze.confidence,
        seed: ctx.seed(STAGE_ANALYZE),
        ..CompareConfig::default()
    };
    let report = compare(&profiles, &rewards.rewards, &compare_cfg)?;
    for r in &report.improvements {
        info!(
            "k = {:>3} {:<10} vs {:<10} {:<11} {:+.4} [{:+.4}, {:+.4}]",
            r.k,
            r.strategy,
            r.baseline,
            r.group.name(),
            r.mean,
            r.ci_low,
            r.ci_high
        );
    }

    let stamp = artifacts::stamp(cfg, data.hash.clone());
    ws.write_json(
        REPORT_JSON,
        &ReportFile {
            meta: &stamp,
            compare: &compare_cfg,
            report: &report,
        },
    )?;
    ws.write_csv(AUROC_CSV, &report.auroc)?;
    ws.write_csv(IMPROVEMENTS_CSV, &report.improvements)?;
    ws.write_csv(TTESTS_CSV, &report.ttests)?;
    let summary: Vec<WassersteinSummary> = report
        .wasserstein
        .iter()
        .map(|w| WassersteinSummary {
            k: w.k,
            group: w.group,
            distribution: w.distribution,
            strategy: &w.strategy,
            reference: &w.reference,
            n_tasks: w.n_tasks,
            mean: w.mean,
            sd: w.sd,
        })
        .collect();
    ws.write_csv(WASSERSTEIN_CSV, &summary)?;
    let per_task: Vec<WassersteinTask> = report
        .wasserstein
        .iter()
        .flat_map(|w| {
            w.per_task.iter().enumerate().map(move |(i, &d)| WassersteinTask {
                k: w.k,
                group: w.group,
                distribution: w.distribution,
                strategy: &w.strategy,
                task_index: i,
                distance: d,
            })
        })
        .collect();
    ws.write_csv(WASSERSTEIN_TASKS_CSV, &per_task)?;
    let rows: Vec<ProfileRow> = profiles
        .iter()
        .flat_map(|p| {
            p.records.iter().map(move |r| ProfileRow {
                k: p.k,
                strategy: &p.strategy,
                task_id: r.task_id,
                holdout: r.holdout,
                frontal_fraction: r.frontal_fraction,
                female_fraction: r.female_fraction,
                mean_age: r.mean_age,
                pairwise_mean: r.pairwise_mean,
                pairwise_max: r.pairwise_max,
            })
        })
        .collect();
    ws.write_csv(PROFILES_CSV, &rows)?;
    ws.finish(ANALYZE_META, "analyze", None, &stamp, BTreeMap::new())?;
    Ok(())
}
