//! Selection strategies behind one interface.
//!
//! Every selector sees a [`PoolView`], which carries embeddings and clinical
//! features but no labels, and returns `K` distinct pool positions.

mod bilstm;
mod kmedoids;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{sample_without_replacement, softmax, Mat64, SeededRng};
use crate::tasks::PoolView;

pub use crate::numerics::SelectionOutcome;
pub use bilstm::{ForwardTrace, ParamBlock, SelectorParams, CHECKPOINT_MAGIC};
pub use kmedoids::{assignment_cost, pam, PamResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    MedSelect,
    Clinical,
    Random,
    KMedoids,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MedSelect,
        Strategy::Clinical,
        Strategy::Random,
        Strategy::KMedoids,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MedSelect => "medselect",
            Strategy::Clinical => "clinical",
            Strategy::Random => "random",
            Strategy::KMedoids => "kmedoids",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, Strategy::MedSelect | Strategy::Clinical)
    }

    /// Per-item input features a trainable strategy reads.
    pub fn features(self) -> Option<FeatureKind> {
        match self {
            Strategy::MedSelect => Some(FeatureKind::Embedding),
            Strategy::Clinical => Some(FeatureKind::Clinical),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected medselect, clinical, random or kmedoids)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// The item embedding as is.
    Embedding,
    /// `(age / 100, sex, laterality)`.
    Clinical,
}

impl FeatureKind {
    pub fn input_dim(self, pool: &PoolView) -> usize {
        match self {
            FeatureKind::Embedding => pool.dim(),
            FeatureKind::Clinical => 3,
        }
    }

    pub fn extract(self, pool: &PoolView) -> Vec<Vec<f64>> {
        match self {
            FeatureKind::Embedding => pool.embeddings().iter().map(|e| e.to_vec()).collect(),
            FeatureKind::Clinical => pool
                .clinical()
                .iter()
                .map(|c| vec![c.age / 100.0, c.sex as f64, c.laterality as f64])
                .collect(),
        }
    }
}

pub trait Selector: Sync {
    fn select(&self, pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome>;
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} items from a pool of {n}"
        )));
    }
    Ok(())
}

/// Uniform selection without replacement.
///
/// The recorded log-probability is that of the unordered set, `-ln C(N, K)`,
/// split per draw as `ln((K - t) / (N - t))`.
pub fn random_select(pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome> {
    let n = pool.len();
    check_k(k, n)?;
    let indices = rng.choose_distinct(n, k);
    let per_draw_logp: Vec<f64> = (0..k)
        .map(|t| ((k - t) as f64 / (n - t) as f64).ln())
        .collect();
    let total_logp = -(ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0));
    let total_logp = if k == n || k == 0 { 0.0 } else { total_logp };
    Ok(SelectionOutcome {
        indices,
        per_draw_logp,
        total_logp,
        params_version: None,
    })
}

/// Medoids of a PAM clustering of the pool embeddings under L2 distance.
pub fn kmedoids_select(pool: &PoolView, k: usize, max_iters: usize) -> Result<SelectionOutcome> {
    check_k(k, pool.len())?;
    if k == 0 {
        return Ok(SelectionOutcome {
            indices: vec![],
            per_draw_logp: vec![],
            total_logp: 0.0,
            params_version: None,
        });
    }
    let dist = Mat64::pairwise_l2(pool.embeddings());
    let r = pam(&dist, k, max_iters)?;
    Ok(SelectionOutcome {
        per_draw_logp: vec![0.0; k],
        indices: r.medoids,
        total_logp: 0.0,
        params_version: None,
    })
}

pub struct RandomSelector;

impl Selector for RandomSelector {
    fn select(&self, pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome> {
        random_select(pool, k, rng)
    }
}

pub struct KMedoidsSelector {
    pub max_iters: usize,
}

impl Default for KMedoidsSelector {
    fn default() -> Self {
        Self { max_iters: 100 }
    }
}

impl Selector for KMedoidsSelector {
    fn select(&self, pool: &PoolView, k: usize, _rng: &mut SeededRng) -> Result<SelectionOutcome> {
        kmedoids_select(pool, k, self.max_iters)
    }
}

/// One logit per pool position from a recurrent selector.
pub fn policy_logits(params: &SelectorParams, features: FeatureKind, pool: &PoolView) -> Result<ForwardTrace> {
    let expected = params.input_dim();
    let got = features.input_dim(pool);
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    params.forward(&features.extract(pool), pool.order())
}

/// Samples `k` positions from `softmax(logits)` with sequential
/// renormalization, recording the parameter version.
pub fn policy_select(
    params: &SelectorParams,
    features: FeatureKind,
    pool: &PoolView,
    k: usize,
    rng: &mut SeededRng,
) -> Result<SelectionOutcome> {
    policy_select_traced(params, features, pool, k, Some(rng)).map(|(out, _)| out)
}

/// Top-`k` logits, highest first; log-probabilities follow the same
/// sequential scheme as sampling.
pub fn policy_select_greedy(
    params: &SelectorParams,
    features: FeatureKind,
    pool: &PoolView,
    k: usize,
) -> Result<SelectionOutcome> {
    policy_select_traced(params, features, pool, k, None).map(|(out, _)| out)
}

/// Stochastic selection when `rng` is given, greedy top-`k` otherwise; also
/// returns the forward trace so the gradient can skip a second forward pass.
pub fn policy_select_traced(
    params: &SelectorParams,
    features: FeatureKind,
    pool: &PoolView,
    k: usize,
    rng: Option<&mut SeededRng>,
) -> Result<(SelectionOutcome, ForwardTrace)> {
    check_k(k, pool.len())?;
    let trace = policy_logits(params, features, pool)?;
    let mut out = match rng {
        Some(rng) => sample_without_replacement(&softmax(&trace.logits), k, rng)?,
        None => {
            let mut idx: Vec<usize> = (0..trace.logits.len()).collect();
            idx.sort_by(|&a, &b| trace.logits[b].total_cmp(&trace.logits[a]).then(a.cmp(&b)));
            idx.truncate(k);
            let per_draw_logp = per_draw_log_probs(&trace.logits, &idx);
            SelectionOutcome {
                total_logp: per_draw_logp.iter().sum(),
                per_draw_logp,
                indices: idx,
                params_version: None,
            }
        }
    };
    out.params_version = Some(params.version());
    Ok((out, trace))
}

pub fn medselect_select(params: &SelectorParams, pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome> {
    policy_select(params, FeatureKind::Embedding, pool, k, rng)
}

pub fn clinical_select(params: &SelectorParams, pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome> {
    policy_select(params, FeatureKind::Clinical, pool, k, rng)
}

fn log_sum_exp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = xs.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln P(draw t | draws before t)` for an ordered selection under
/// sequential renormalization of `softmax(logits)`.
pub fn per_draw_log_probs(logits: &[f64], indices: &[usize]) -> Vec<f64> {
    let mut remaining = vec![true; logits.len()];
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let lse = log_sum_exp(logits.iter().zip(&remaining).filter(|(_, r)| **r).map(|(l, _)| l));
        out.push(logits[i] - lse);
        remaining[i] = false;
    }
    out
}

/// Gradient of the ordered selection log-probability with respect to the
/// logits: `sum_t (e_{i_t} - pi_t)`, where `pi_t` is the renormalized
/// softmax over the positions still available at draw `t`.
pub fn log_prob_logit_grad(logits: &[f64], indices: &[usize]) -> Vec<f64> {
    let n = logits.len();
    let mut remaining = vec![true; n];
    let mut grad = vec![0.0; n];
    for &i in indices {
        let m = logits
            .iter()
            .zip(&remaining)
            .filter(|(_, r)| **r)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits
            .iter()
            .zip(&remaining)
            .map(|(l, r)| if *r { (l - m).exp() } else { 0.0 })
            .collect();
        let z: f64 = w.iter().sum();
        for (g, wj) in grad.iter_mut().zip(&w) {
            *g -= wj / z;
        }
        grad[i] += 1.0;
        remaining[i] = false;
    }
    grad
}

/// Exact log-probability of an ordered selection as a function of the
/// parameters (used for gradient checks).
pub fn selection_log_prob(
    params: &SelectorParams,
    features: FeatureKind,
    pool: &PoolView,
    indices: &[usize],
) -> Result<f64> {
    let trace = policy_logits(params, features, pool)?;
    Ok(per_draw_log_probs(&trace.logits, indices).iter().sum())
}

/// `scale * grad_theta ln P_theta(outcome | pool)` via backpropagation
/// through the renormalized softmax chain and both recurrent directions.
pub fn policy_backward(
    params: &SelectorParams,
    features: FeatureKind,
    pool: &PoolView,
    outcome: &SelectionOutcome,
    scale: f64,
) -> Result<Vec<f64>> {
    match outcome.params_version {
        Some(v) if v == params.version() => {}
        Some(v) => {
            return Err(Error::StaleOutcome {
                outcome: v,
                current: params.version(),
            })
        }
        None => {
            return Err(Error::InvalidArgument(
                "outcome was not produced by a trainable selector".into(),
            ))
        }
    }
    if scale == 0.0 {
        return Ok(vec![0.0; params.len()]);
    }
    let trace = policy_logits(params, features, pool)?;
    backward_from_trace(params, &trace, outcome, scale)
}

/// Same as [`policy_backward`] but reuses the trace recorded at selection
/// time. The caller guarantees the trace came from `params`.
pub fn backward_from_trace(
    params: &SelectorParams,
    trace: &ForwardTrace,
    outcome: &SelectionOutcome,
    scale: f64,
) -> Result<Vec<f64>> {
    if let Some(v) = outcome.params_version.filter(|&v| v != params.version()) {
        return Err(Error::StaleOutcome {
            outcome: v,
            current: params.version(),
        });
    }
    if scale == 0.0 {
        return Ok(vec![0.0; params.len()]);
    }
    let mut dl = log_prob_logit_grad(&trace.logits, &outcome.indices);
    for g in dl.iter_mut() {
        *g *= scale;
    }
    params.backward(trace, &dl)
}

pub fn medselect_backward(
    params: &SelectorParams,
    pool: &PoolView,
    outcome: &SelectionOutcome,
    scale: f64,
) -> Result<Vec<f64>> {
    policy_backward(params, FeatureKind::Embedding, pool, outcome, scale)
}

/// A recurrent selector bound to its parameters.
pub struct PolicySelector<'a> {
    pub params: &'a SelectorParams,
    pub features: FeatureKind,
    pub greedy: bool,
}

impl Selector for PolicySelector<'_> {
    fn select(&self, pool: &PoolView, k: usize, rng: &mut SeededRng) -> Result<SelectionOutcome> {
        if self.greedy {
            policy_select_greedy(self.params, self.features, pool, k)
        } else {
            policy_select(self.params, self.features, pool, k, rng)
        }
    }
}

#[cfg(test)]
mod tests;
