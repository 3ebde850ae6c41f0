//! REINFORCE meta-training of the recurrent selectors.
//!
//! Per task: select `K` pool items, reveal their labels, fit the prototype
//! predictor, and score the query set by AUROC. The reward minus the reward
//! of a fresh random selection on the same task weights the score function
//! `grad ln P(selection)`; batch means of that product drive Adam.

mod adam;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamState, ADAM_MAGIC};

use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::numerics::{derive_seed, SeededRng};
use crate::predictor;
use crate::selectors::{
    backward_from_trace, kmedoids_select, policy_backward, policy_select_traced, random_select, FeatureKind,
    ForwardTrace, SelectionOutcome, SelectorParams, Strategy,
};
use crate::tasks::{EpisodeSplit, ItemStore, PoolView, Task};

/// Child-stream tags under the training seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EPISODE: u64 = 3;
const STREAM_VALIDATION: u64 = 4;

/// Within one episode stream: the selector's draws and each baseline draw.
const EPISODE_POLICY: u64 = 0;
const EPISODE_BASELINE: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Tasks per update.
    pub batch_size: usize,
    /// Passes over meta-train.
    pub epochs: usize,
    /// Label budget.
    pub k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Updates between meta-validation runs.
    pub val_every: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Random selections averaged into the baseline reward.
    pub baseline_draws: usize,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Validate with top-K logits instead of seeded sampling.
    pub greedy_validation: bool,
    /// Add `wall_ms` to log records (makes logs run-dependent).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 5,
            k: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 10,
            seed: 0,
            hidden: 256,
            baseline_draws: 1,
            clip_norm: None,
            greedy_validation: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.k == 0 || self.hidden == 0 || self.val_every == 0 {
            return bad("batch_size, k, hidden and val_every must be positive");
        }
        if self.baseline_draws == 0 {
            return bad("baseline_draws must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// How an episode selects and scores.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeSpec<'a> {
    pub strategy: Strategy,
    /// Required for trainable strategies.
    pub params: Option<&'a SelectorParams>,
    pub k: usize,
    /// Random draws averaged into the baseline; 0 skips the baseline.
    pub baseline_draws: usize,
    /// Top-K logits instead of sampling for trainable strategies.
    pub greedy: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeResult {
    pub task_id: u64,
    /// AUROC of the predictor fit on the selection.
    pub reward: f64,
    /// Mean AUROC of the random baselines, when computed.
    pub baseline: Option<f64>,
    /// `reward - baseline`, or 0 without a baseline.
    pub advantage: f64,
    pub outcome: SelectionOutcome,
    /// Labels the oracle handed out for this task, baselines included.
    pub labels_revealed: usize,
    #[serde(skip)]
    pub trace: Option<ForwardTrace>,
}

/// AUROC on the task's query set of the predictor fit on the labels of the
/// selected pool positions. Labels come only through the oracle.
pub fn selection_reward(store: &ItemStore, task: &Task, indices: &[usize], revealed: &mut usize) -> Result<f64> {
    let mut oracle = store.oracle(task);
    let support = oracle.reveal(indices)?;
    *revealed += oracle.revealed();
    let protos = predictor::fit(&support)?;
    let (qx, qy) = store.query(task)?;
    let scores = predictor::score_query(&protos, &qx)?;
    auroc(&scores, &qy)
}

/// The selection step of [`run_episode`], without labels or rewards: the
/// same `spec` and `rng` pick the same items.
pub fn episode_selection(
    pool: &PoolView,
    spec: &EpisodeSpec,
    rng: &SeededRng,
) -> Result<(SelectionOutcome, Option<ForwardTrace>)> {
    let mut policy_rng = rng.child(&[EPISODE_POLICY]);
    match (spec.strategy.features(), spec.params) {
        (Some(features), Some(params)) => {
            let r = if spec.greedy { None } else { Some(&mut policy_rng) };
            let (o, t) = policy_select_traced(params, features, pool, spec.k, r)?;
            Ok((o, Some(t)))
        }
        (Some(_), None) => Err(Error::InvalidArgument(format!(
            "strategy {} needs parameters",
            spec.strategy
        ))),
        (None, _) => match spec.strategy {
            Strategy::Random => Ok((random_select(pool, spec.k, &mut policy_rng)?, None)),
            _ => Ok((kmedoids_select(pool, spec.k, 100)?, None)),
        },
    }
}

/// Runs one episode on `task`. Draws come from child streams of `rng`, so
/// the policy's draws and the baseline's draws are independent.
pub fn run_episode(store: &ItemStore, task: &Task, spec: &EpisodeSpec, rng: &SeededRng) -> Result<EpisodeResult> {
    let pool = store.pool_view(task)?;
    let (outcome, trace) = episode_selection(&pool, spec, rng)?;
    let mut revealed = 0;
    let reward = selection_reward(store, task, &outcome.indices, &mut revealed)?;
    let baseline = if spec.baseline_draws > 0 {
        let mut total = 0.0;
        for j in 0..spec.baseline_draws {
            let mut brng = rng.child(&[EPISODE_BASELINE, j as u64]);
            let b = random_select(&pool, spec.k, &mut brng)?;
            total += selection_reward(store, task, &b.indices, &mut revealed)?;
        }
        Some(total / spec.baseline_draws as f64)
    } else {
        None
    };
    Ok(EpisodeResult {
        task_id: task.task_id,
        reward,
        advantage: baseline.map_or(0.0, |b| reward - b),
        baseline,
        outcome,
        labels_revealed: revealed,
        trace,
    })
}

/// Mean over the batch of `advantage * grad ln P(selection)`.
///
/// Per-episode gradients are computed in parallel and added in batch order,
/// so the sum is the same for any number of workers.
pub fn batch_gradient(
    params: &SelectorParams,
    features: FeatureKind,
    batch: &[EpisodeResult],
    pools: &[PoolView],
) -> Result<Vec<f64>> {
    if batch.len() != pools.len() {
        return Err(Error::InvalidArgument(format!(
            "{} episodes but {} pools",
            batch.len(),
            pools.len()
        )));
    }
    let mut total = vec![0.0; params.len()];
    if batch.is_empty() {
        return Ok(total);
    }
    // bounded memory: at most this many gradient vectors alive at once
    let group = rayon::current_num_threads().max(1) * 2;
    let items: Vec<(&EpisodeResult, &PoolView)> = batch.iter().zip(pools).collect();
    for chunk in items.chunks(group) {
        let grads: Vec<Result<Vec<f64>>> = chunk
            .par_iter()
            .map(|(ep, pool)| match &ep.trace {
                Some(t) => backward_from_trace(params, t, &ep.outcome, ep.advantage),
                None => policy_backward(params, features, pool, &ep.outcome, ep.advantage),
            })
            .collect();
        for g in grads {
            for (t, gi) in total.iter_mut().zip(g?) {
                *t += gi;
            }
        }
    }
    let b = batch.len() as f64;
    for t in total.iter_mut() {
        *t /= b;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Applies one Adam update from a batch generated under the current
/// parameters.
pub fn policy_gradient_step(
    params: &mut SelectorParams,
    adam: &mut AdamState,
    batch: &[EpisodeResult],
    pools: &[PoolView],
    features: FeatureKind,
    config: &TrainConfig,
) -> Result<StepStats> {
    let mut grad = batch_gradient(params, features, batch, pools)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NumericalAbort {
            step: adam.step + 1,
            task_ids: batch.iter().map(|e| e.task_id).collect(),
            params: params.as_slice().to_vec(),
        });
    }
    let mut clipped = false;
    if let Some(c) = config.clip_norm {
        if grad_norm > c {
            let s = c / grad_norm;
            grad.iter_mut().for_each(|g| *g *= s);
            clipped = true;
        }
    }
    // Adam minimizes; the objective is maximized
    grad.iter_mut().for_each(|g| *g = -*g);
    let mut result = Ok(());
    params.update(|p| result = adam.apply(p, &grad, config.hyper()));
    result?;
    Ok(StepStats { grad_norm, clipped })
}

/// Mean reward over `tasks`; task `i` draws from a stream fixed by
/// `seed` and its id, so checkpoints are compared on identical draws.
pub fn meta_validate(
    store: &ItemStore,
    tasks: &[Task],
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no validation tasks".into()));
    }
    let spec = EpisodeSpec {
        baseline_draws: 0,
        ..*spec
    };
    let rewards: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|t| {
            let rng = SeededRng::new(derive_seed(seed, &[t.task_id]));
            run_episode(store, t, &spec, &rng).map(|e| e.reward)
        })
        .collect();
    let mut sum = 0.0;
    for r in rewards {
        sum += r?;
    }
    Ok(sum / tasks.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(rename = "mean_R", default, skip_serializing_if = "Option::is_none")]
    pub mean_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_adv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

pub struct TrainOutput {
    pub initial: SelectorParams,
    /// Highest meta-validation reward seen (earliest on ties); the initial
    /// parameters when no validation ran.
    pub best: SelectorParams,
    pub best_step: u64,
    pub best_val: Option<f64>,
    pub final_params: SelectorParams,
    pub adam: AdamState,
    pub log: Vec<LogRecord>,
}

/// Initial parameters for `strategy` on `store`.
pub fn init_params(store: &ItemStore, strategy: Strategy, config: &TrainConfig) -> Result<SelectorParams> {
    let input_dim = match strategy.features() {
        Some(FeatureKind::Embedding) => store.dim(),
        Some(FeatureKind::Clinical) => 3,
        None => {
            return Err(Error::Config(format!(
                "strategy {strategy} is not trainable (expected medselect or clinical)"
            )))
        }
    };
    let mut rng = SeededRng::new(derive_seed(config.seed, &[STREAM_INIT]));
    Ok(SelectorParams::init(input_dim, config.hidden, &mut rng))
}

/// Full meta-training run. Every log record is passed to `sink` as soon as
/// it exists, so an aborted run leaves its log up to the failure.
pub fn train(
    config: &TrainConfig,
    store: &ItemStore,
    split: &EpisodeSplit,
    strategy: Strategy,
    mut sink: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let features = strategy
        .features()
        .ok_or_else(|| Error::Config(format!("strategy {strategy} is not trainable")))?;
    for t in split.meta_train.iter().chain(&split.meta_val) {
        if config.k > t.pool.len() {
            return Err(Error::Config(format!(
                "k = {} exceeds the pool size {} of task {}",
                config.k,
                t.pool.len(),
                t.task_id
            )));
        }
    }
    if split.meta_val.is_empty() {
        return Err(Error::Config("meta-validation split is empty".into()));
    }
    let start = Instant::now();
    let wall = |on: bool| on.then(|| start.elapsed().as_millis() as u64);
    let initial = init_params(store, strategy, config)?;
    let mut params = initial.clone();
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::new();
    let val_seed = derive_seed(config.seed, &[STREAM_VALIDATION]);
    if config.epochs == 0 {
        return Ok(TrainOutput {
            best: initial.clone(),
            final_params: initial.clone(),
            initial,
            best_step: 0,
            best_val: None,
            adam,
            log,
        });
    }
    let validate = |p: &SelectorParams| -> Result<f64> {
        let spec = EpisodeSpec {
            strategy,
            params: Some(p),
            k: config.k,
            baseline_draws: 0,
            greedy: config.greedy_validation,
        };
        meta_validate(store, &split.meta_val, &spec, val_seed)
    };

    let v0 = validate(&params)?;
    let (mut best, mut best_val, mut best_step) = (params.clone(), v0, 0u64);
    let rec = LogRecord {
        step: 0,
        epoch: None,
        mean_r: None,
        mean_b: None,
        mean_adv: None,
        grad_norm: None,
        val_reward: Some(v0),
        wall_ms: wall(config.record_wall_time),
    };
    sink(&rec)?;
    log.push(rec);

    let n_train = split.meta_train.len();
    let batches_per_epoch = n_train.div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = SeededRng::new(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64])).permutation(n_train);
        for chunk in order.chunks(config.batch_size) {
            let tasks: Vec<&Task> = chunk.iter().map(|&i| &split.meta_train[i]).collect();
            let pools: Vec<PoolView> = tasks.iter().map(|t| store.pool_view(t)).collect::<Result<_>>()?;
            let spec = EpisodeSpec {
                strategy,
                params: Some(&params),
                k: config.k,
                baseline_draws: config.baseline_draws,
                greedy: false,
            };
            let episodes: Vec<EpisodeResult> = tasks
                .par_iter()
                .map(|t| {
                    let rng = SeededRng::new(derive_seed(
                        config.seed,
                        &[STREAM_EPISODE, epoch as u64, t.task_id],
                    ));
                    run_episode(store, t, &spec, &rng)
                })
                .collect::<Result<_>>()?;
            let stats = policy_gradient_step(&mut params, &mut adam, &episodes, &pools, features, config)?;
            step += 1;
            let b = episodes.len() as f64;
            let mean = |f: fn(&EpisodeResult) -> f64| episodes.iter().map(f).sum::<f64>() / b;
            let val = if step.is_multiple_of(config.val_every as u64) || step == total_steps {
                let v = validate(&params)?;
                if v > best_val {
                    best = params.clone();
                    best_val = v;
                    best_step = step;
                }
                Some(v)
            } else {
                None
            };
            let rec = LogRecord {
                step,
                epoch: Some(epoch),
                mean_r: Some(mean(|e| e.reward)),
                mean_b: Some(mean(|e| e.baseline.unwrap_or(0.0))),
                mean_adv: Some(mean(|e| e.advantage)),
                grad_norm: Some(stats.grad_norm),
                val_reward: val,
                wall_ms: wall(config.record_wall_time),
            };
            sink(&rec)?;
            log.push(rec);
        }
    }
    Ok(TrainOutput {
        initial,
        best,
        best_step,
        best_val: Some(best_val),
        final_params: params,
        adam,
        log,
    })
}

#[cfg(test)]
mod tests;
