//! Comparative analyses of selection strategies over meta-test tasks:
//! AUROC tables with bootstrap CIs, clinical composition of selections,
//! pairwise-distance statistics and Wasserstein distances to a reference
//! selector.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{pairwise_l2_stats, wasserstein1, welch_ttest};
use crate::numerics::{derive_seed, splitmix64, SeededRng};
use crate::selectors::{SelectorParams, Strategy};
use crate::tasks::{ItemStore, Task};
use crate::trainer::{episode_selection, run_episode, EpisodeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    NonHoldout,
    Holdout,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::NonHoldout, Group::Holdout];

    pub fn of(holdout: bool) -> Self {
        if holdout {
            Group::Holdout
        } else {
            Group::NonHoldout
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::NonHoldout => "non_holdout",
            Group::Holdout => "holdout",
        }
    }
}

/// A named selector to evaluate: a strategy, its parameters when trainable,
/// and the label used in reports (two runs of one strategy with different
/// seeds need different labels).
#[derive(Clone, Copy, Debug)]
pub struct SelectorSource<'a> {
    pub label: &'a str,
    pub strategy: Strategy,
    pub params: Option<&'a SelectorParams>,
    pub greedy: bool,
}

impl<'a> SelectorSource<'a> {
    fn spec(&self, k: usize) -> EpisodeSpec<'a> {
        EpisodeSpec {
            strategy: self.strategy,
            params: self.params,
            k,
            baseline_draws: 0,
            greedy: self.greedy,
        }
    }
}

/// Seed of the stream a labeled selector uses at budget `k`.
pub fn stream_seed(seed: u64, label: &str, k: usize) -> u64 {
    let tag = label
        .bytes()
        .fold(0x006C_6162_656C_u64, |h, b| splitmix64(h ^ u64::from(b)));
    derive_seed(seed, &[tag, k as u64])
}

fn task_rng(seed: u64, task: &Task) -> SeededRng {
    SeededRng::new(derive_seed(seed, &[task.task_id]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub k: usize,
    pub strategy: String,
    pub task_id: u64,
    pub condition: u32,
    pub holdout: bool,
    pub reward: f64,
}

/// Test AUROC of `source` on every task; task `i` uses the stream
/// `derive_seed(seed, [task_id])`, as [`profile_selections`] does.
pub fn evaluate_rewards(
    store: &ItemStore,
    tasks: &[Task],
    source: &SelectorSource,
    k: usize,
    seed: u64,
) -> Result<Vec<RewardRecord>> {
    let spec = source.spec(k);
    tasks
        .par_iter()
        .map(|t| {
            let ep = run_episode(store, t, &spec, &task_rng(seed, t))?;
            Ok(RewardRecord {
                k,
                strategy: source.label.to_string(),
                task_id: t.task_id,
                condition: t.condition,
                holdout: t.holdout,
                reward: ep.reward,
            })
        })
        .collect()
}

/// Composition of one task's selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub task_id: u64,
    pub holdout: bool,
    pub selected_ids: Vec<u64>,
    pub frontal_fraction: f64,
    pub female_fraction: f64,
    pub mean_age: f64,
    /// `None` for selections of fewer than two items.
    pub pairwise_mean: Option<f64>,
    pub pairwise_max: Option<f64>,
    pub pairwise_all: Vec<f64>,
    pub ages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionProfile {
    pub strategy: String,
    pub k: usize,
    pub records: Vec<SelectionRecord>,
}

/// Selects on every task and summarizes what was picked.
pub fn profile_selections(
    store: &ItemStore,
    tasks: &[Task],
    source: &SelectorSource,
    k: usize,
    seed: u64,
) -> Result<SelectionProfile> {
    if k == 0 {
        return Err(Error::InvalidArgument("cannot profile empty selections".into()));
    }
    let spec = source.spec(k);
    let records = tasks
        .par_iter()
        .map(|t| {
            let pool = store.pool_view(t)?;
            let (outcome, _) = episode_selection(&pool, &spec, &task_rng(seed, t))?;
            let ids: Vec<u64> = outcome.indices.iter().map(|&i| t.pool[i]).collect();
            let mut embeddings = Vec::with_capacity(k);
            let (mut frontal, mut female, mut ages) = (0usize, 0usize, Vec::with_capacity(k));
            for &id in &ids {
                let item = store.get(id)?;
                item.clinical.validate().map_err(|e| {
                    Error::Data(format!("item {id} of task {}: {e}", t.task_id))
                })?;
                frontal += usize::from(item.clinical.is_frontal());
                female += usize::from(item.clinical.is_female());
                ages.push(item.clinical.age);
                embeddings.push(item.embedding.as_slice());
            }
            let n = ids.len() as f64;
            let pw = if ids.len() >= 2 {
                Some(pairwise_l2_stats(&embeddings)?)
            } else {
                None
            };
            Ok(SelectionRecord {
                task_id: t.task_id,
                holdout: t.holdout,
                frontal_fraction: frontal as f64 / n,
                female_fraction: female as f64 / n,
                mean_age: ages.iter().sum::<f64>() / n,
                pairwise_mean: pw.as_ref().map(|p| p.mean),
                pairwise_max: pw.as_ref().map(|p| p.max),
                pairwise_all: pw.map(|p| p.all_pairs).unwrap_or_default(),
                ages,
                selected_ids: ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionProfile {
        strategy: source.label.to_string(),
        k,
        records,
    })
}

/// Percentile bootstrap CI of the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, confidence: f64, rng: &mut SeededRng) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs values and resamples".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence {confidence} outside (0, 1)")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.index(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let lo = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - alpha) * resamples as f64).ceil() as usize).saturating_sub(1).min(resamples - 1);
    Ok((means[lo], means[hi]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Strategy every other one is compared against.
    pub reference: String,
    /// Baseline for the improvement-over-clustering rows.
    pub clustering: String,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            reference: "random".into(),
            clustering: "kmedoids".into(),
            bootstrap_resamples: 10_000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub k: usize,
    pub strategy: String,
    pub group: Group,
    pub n_tasks: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean per-task paired difference `strategy - baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub k: usize,
    pub strategy: String,
    pub baseline: String,
    pub group: Group,
    pub n_tasks: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Frontal,
    Female,
    Age,
    PairwiseL2,
}

impl Feature {
    pub const ALL: [Feature; 4] = [Feature::Frontal, Feature::Female, Feature::Age, Feature::PairwiseL2];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Frontal => "frontal",
            Feature::Female => "female",
            Feature::Age => "age",
            Feature::PairwiseL2 => "pairwise_l2",
        }
    }

    fn per_task(self, r: &SelectionRecord) -> Option<f64> {
        match self {
            Feature::Frontal => Some(r.frontal_fraction),
            Feature::Female => Some(r.female_fraction),
            Feature::Age => Some(r.mean_age),
            Feature::PairwiseL2 => r.pairwise_mean,
        }
    }
}

/// Welch test of per-task aggregates, strategy against the reference.
/// Statistics are `None` when the test is undefined (both samples constant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub k: usize,
    pub group: Group,
    pub feature: Feature,
    pub strategy: String,
    pub reference: String,
    pub mean_strategy: f64,
    pub mean_reference: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub dof: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Ages of the selected items.
    Age,
    /// All pairwise L2 distances within the selection.
    PairwiseL2,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Age => "age",
            Distribution::PairwiseL2 => "pairwise_l2",
        }
    }

    fn sample(self, r: &SelectionRecord) -> &[f64] {
        match self {
            Distribution::Age => &r.ages,
            Distribution::PairwiseL2 => &r.pairwise_all,
        }
    }
}

/// Per-task Wasserstein-1 distances between a strategy's selection and the
/// reference's selection on the same task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WassersteinRow {
    pub k: usize,
    pub group: Group,
    pub distribution: Distribution,
    pub strategy: String,
    pub reference: String,
    pub n_tasks: usize,
    pub mean: f64,
    pub sd: f64,
    pub per_task: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub auroc: Vec<AurocRow>,
    pub improvements: Vec<ImprovementRow>,
    pub ttests: Vec<TTestRow>,
    pub wasserstein: Vec<WassersteinRow>,
}

impl ComparisonReport {
    pub fn auroc_row(&self, k: usize, strategy: &str, group: Group) -> Option<&AurocRow> {
        self.auroc
            .iter()
            .find(|r| r.k == k && r.strategy == strategy && r.group == group)
    }

    pub fn improvement(&self, k: usize, strategy: &str, baseline: &str, group: Group) -> Option<&ImprovementRow> {
        self.improvements
            .iter()
            .find(|r| r.k == k && r.strategy == strategy && r.baseline == baseline && r.group == group)
    }

    pub fn ttest(&self, k: usize, strategy: &str, feature: Feature, group: Group) -> Option<&TTestRow> {
        self.ttests
            .iter()
            .find(|r| r.k == k && r.strategy == strategy && r.feature == feature && r.group == group)
    }

    pub fn wasserstein_row(&self, k: usize, strategy: &str, dist: Distribution, group: Group) -> Option<&WassersteinRow> {
        self.wasserstein
            .iter()
            .find(|r| r.k == k && r.strategy == strategy && r.distribution == dist && r.group == group)
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Rewards keyed by (k, strategy) then task id.
type RewardIndex<'a> = BTreeMap<(usize, &'a str), BTreeMap<u64, &'a RewardRecord>>;

fn index_rewards(rewards: &[RewardRecord]) -> Result<RewardIndex<'_>> {
    let mut idx: RewardIndex = BTreeMap::new();
    for r in rewards {
        if idx
            .entry((r.k, r.strategy.as_str()))
            .or_default()
            .insert(r.task_id, r)
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate reward for task {} ({}, k = {})",
                r.task_id, r.strategy, r.k
            )));
        }
    }
    Ok(idx)
}

/// Builds the report. Every strategy must cover the same task set at a
/// given `k`; mismatches are an error rather than silently dropped tasks.
pub fn compare(profiles: &[SelectionProfile], rewards: &[RewardRecord], config: &CompareConfig) -> Result<ComparisonReport> {
    let idx = index_rewards(rewards)?;
    let mut boot_stream = 0u64;
    let mut next_rng = || {
        boot_stream += 1;
        SeededRng::new(derive_seed(config.seed, &[boot_stream]))
    };

    let mut auroc_rows = Vec::new();
    let mut improvements = Vec::new();
    let ks: BTreeSet<usize> = idx.keys().map(|(k, _)| *k).collect();
    for &k in &ks {
        let strategies: Vec<&str> = idx.keys().filter(|(kk, _)| *kk == k).map(|(_, s)| *s).collect();
        let tasks: BTreeSet<u64> = idx[&(k, strategies[0])].keys().copied().collect();
        for s in &strategies {
            let mine: BTreeSet<u64> = idx[&(k, *s)].keys().copied().collect();
            if mine != tasks {
                return Err(Error::Data(format!(
                    "strategy {s} at k = {k} covers a different task set than {}",
                    strategies[0]
                )));
            }
        }
        for group in Group::ALL {
            let group_tasks: Vec<u64> = tasks
                .iter()
                .copied()
                .filter(|t| Group::of(idx[&(k, strategies[0])][t].holdout) == group)
                .collect();
            if group_tasks.is_empty() {
                continue;
            }
            let values = |s: &str| -> Vec<f64> { group_tasks.iter().map(|t| idx[&(k, s)][t].reward).collect() };
            for s in &strategies {
                let v = values(s);
                let (lo, hi) = bootstrap_mean_ci(&v, config.bootstrap_resamples, config.confidence, &mut next_rng())?;
                auroc_rows.push(AurocRow {
                    k,
                    strategy: s.to_string(),
                    group,
                    n_tasks: v.len(),
                    mean: mean_sd(&v).0,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
            for baseline in [config.clustering.as_str(), config.reference.as_str()] {
                if !strategies.contains(&baseline) {
                    continue;
                }
                let b = values(baseline);
                for s in &strategies {
                    let diff: Vec<f64> = values(s).iter().zip(&b).map(|(x, y)| x - y).collect();
                    let (lo, hi) =
                        bootstrap_mean_ci(&diff, config.bootstrap_resamples, config.confidence, &mut next_rng())?;
                    improvements.push(ImprovementRow {
                        k,
                        strategy: s.to_string(),
                        baseline: baseline.to_string(),
                        group,
                        n_tasks: diff.len(),
                        mean: mean_sd(&diff).0,
                        ci_low: lo,
                        ci_high: hi,
                    });
                }
            }
        }
    }

    let (ttests, wasserstein) = compare_profiles(profiles, config)?;
    Ok(ComparisonReport {
        auroc: auroc_rows,
        improvements,
        ttests,
        wasserstein,
    })
}

fn compare_profiles(profiles: &[SelectionProfile], config: &CompareConfig) -> Result<(Vec<TTestRow>, Vec<WassersteinRow>)> {
    let mut ttests = Vec::new();
    let mut wass = Vec::new();
    let ks: BTreeSet<usize> = profiles.iter().map(|p| p.k).collect();
    for &k in &ks {
        let at_k: Vec<&SelectionProfile> = profiles.iter().filter(|p| p.k == k).collect();
        let Some(reference) = at_k.iter().find(|p| p.strategy == config.reference) else {
            continue;
        };
        let ref_by_task: BTreeMap<u64, &SelectionRecord> =
            reference.records.iter().map(|r| (r.task_id, r)).collect();
        for prof in &at_k {
            let by_task: BTreeMap<u64, &SelectionRecord> = prof.records.iter().map(|r| (r.task_id, r)).collect();
            if by_task.len() != prof.records.len() {
                return Err(Error::Data(format!("profile {} repeats a task", prof.strategy)));
            }
            if !by_task.keys().eq(ref_by_task.keys()) {
                return Err(Error::Data(format!(
                    "profile {} at k = {k} covers a different task set than {}",
                    prof.strategy, config.reference
                )));
            }
            for group in Group::ALL {
                let pairs: Vec<(&SelectionRecord, &SelectionRecord)> = by_task
                    .iter()
                    .filter(|(_, r)| Group::of(r.holdout) == group)
                    .map(|(t, r)| (*r, ref_by_task[t]))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                for feature in Feature::ALL {
                    let a: Vec<f64> = pairs.iter().filter_map(|(r, _)| feature.per_task(r)).collect();
                    let b: Vec<f64> = pairs.iter().filter_map(|(_, r)| feature.per_task(r)).collect();
                    if a.is_empty() || b.is_empty() {
                        continue;
                    }
                    let test = welch_ttest(&a, &b).ok();
                    ttests.push(TTestRow {
                        k,
                        group,
                        feature,
                        strategy: prof.strategy.clone(),
                        reference: config.reference.clone(),
                        mean_strategy: mean_sd(&a).0,
                        mean_reference: mean_sd(&b).0,
                        t: test.map(|x| x.t),
                        p: test.map(|x| x.p),
                        dof: test.map(|x| x.dof),
                    });
                }
                for dist in [Distribution::Age, Distribution::PairwiseL2] {
                    let mut per_task = Vec::with_capacity(pairs.len());
                    for (r, q) in &pairs {
                        let (x, y) = (dist.sample(r), dist.sample(q));
                        if x.is_empty() || y.is_empty() {
                            continue;
                        }
                        per_task.push(wasserstein1(x, y)?);
                    }
                    if per_task.is_empty() {
                        continue;
                    }
                    let (mean, sd) = mean_sd(&per_task);
                    wass.push(WassersteinRow {
                        k,
                        group,
                        distribution: dist,
                        strategy: prof.strategy.clone(),
                        reference: config.reference.clone(),
                        n_tasks: per_task.len(),
                        mean,
                        sd,
                        per_task,
                    });
                }
            }
        }
    }
    Ok((ttests, wass))
}
