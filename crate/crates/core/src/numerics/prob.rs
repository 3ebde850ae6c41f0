use serde::{Deserialize, Serialize};

use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= z;
    }
    out
}

/// The result of drawing `K` distinct pool positions.
///
/// `indices` are in draw order; the sequential log-probability depends on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub indices: Vec<usize>,
    pub per_draw_logp: Vec<f64>,
    pub total_logp: f64,
    /// Version of the selector parameters that produced this outcome, if any.
    pub params_version: Option<u64>,
}

impl SelectionOutcome {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Draws `k` distinct indices by sequential renormalization.
///
/// Each draw is taken from the current distribution; its probability is
/// logged, its mass zeroed and the remainder renormalized. The total
/// log-probability is the sum of the per-draw terms.
pub fn sample_without_replacement(
    probs: &[f64],
    k: usize,
    rng: &mut SeededRng,
) -> Result<SelectionOutcome> {
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be finite and nonnegative, found {p}"
        )));
    }
    let available = probs.iter().filter(|&&p| p > 0.0).count();
    if k > available {
        return Err(Error::InsufficientSupport { k, available });
    }
    let mut remaining = probs.to_vec();
    let mut indices = Vec::with_capacity(k);
    let mut per_draw_logp = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let target = rng.uniform() * total;
        let mut cum = 0.0;
        let mut chosen = None;
        let mut last_positive = 0;
        for (j, &p) in remaining.iter().enumerate() {
            if p > 0.0 {
                last_positive = j;
                cum += p;
                if cum > target {
                    chosen = Some(j);
                    break;
                }
            }
        }
        // rounding can leave `target` just past the final cumulative sum
        let j = chosen.unwrap_or(last_positive);
        per_draw_logp.push((remaining[j] / total).ln());
        remaining[j] = 0.0;
        indices.push(j);
    }
    let total_logp = per_draw_logp.iter().sum();
    Ok(SelectionOutcome {
        indices,
        per_draw_logp,
        total_logp,
        params_version: None,
    })
}

/// Central-difference gradient of `f` at `at`.
pub fn finite_diff_grad<F>(f: F, at: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(+eps)={fp}, f(-eps)={fm}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// Fourth-order central differences: `(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h`.
///
/// Truncation error is O(h^4), so a comparatively large `h` can be used and
/// the rounding error of the difference quotient stays small.
pub fn finite_diff_grad_5pt<F>(f: F, at: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        let mut eval = |step: f64| {
            x[i] = orig + step;
            let v = f(&x);
            x[i] = orig;
            v
        };
        let (p1, m1, p2, m2) = (eval(eps), eval(-eps), eval(2.0 * eps), eval(-2.0 * eps));
        if ![p1, m1, p2, m2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps));
    }
    Ok(grad)
}
