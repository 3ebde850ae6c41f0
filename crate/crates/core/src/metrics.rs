//! Reward and analysis statistics.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::numerics::l2_dist;

/// Area under the ROC curve in the Mann-Whitney form: the fraction of
/// (positive, negative) pairs ranked correctly, tied pairs counting half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score passed to auroc".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "auroc needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks of positives. Midranks are half-integers, so
    // the sum (and U below) is exact in f64.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = idx[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += midrank * pos_in_block as f64;
        i = j;
    }
    let p = n_pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

/// Wasserstein-1 distance between two empirical distributions, integrated
/// exactly over the merged piecewise-constant quantile functions.
///
/// With `L = lcm(n, m)`, both quantile functions are constant on each
/// interval `[i/L, (i+1)/L)`; the sum of `|a - b|` weights over those
/// intervals is accumulated in integer units and divided by `L` once, so
/// for `n == m` the result is exactly `sum |sorted(a) - sorted(b)| / n`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("wasserstein1 needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wasserstein1 input".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (n, m) = (sa.len() as u64, sb.len() as u64);
    let l = n / gcd(n, m) * m;
    let (step_a, step_b) = (l / n, l / m);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut end_a, mut end_b) = (step_a, step_b);
    let mut pos = 0u64;
    let mut total = 0.0f64;
    while pos < l {
        let next = end_a.min(end_b);
        let w = (next - pos) as f64;
        total += (sa[i] - sb[j]).abs() * w;
        pos = next;
        if end_a == next {
            i += 1;
            end_a += step_a;
        }
        if end_b == next {
            j += 1;
            end_b += step_b;
        }
    }
    Ok(total / l as f64)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: f64,
}

/// Welch's unequal-variance two-sample t-test, two-sided.
///
/// The p-value is `I_{dof/(dof+t^2)}(dof/2, 1/2)`, the Student-t tail
/// expressed through the regularized incomplete beta function.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "welch_ttest needs >= 2 samples per group (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("welch_ttest input".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Err(Error::InvalidArgument("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let x = dof / (dof + t * t);
    let p = if t == 0.0 {
        1.0
    } else {
        beta_reg(dof / 2.0, 0.5, x)
    };
    Ok(TTest { t, p, dof })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseStats {
    pub mean: f64,
    pub max: f64,
    /// All `C(K, 2)` distances, ordered by `(i, j)` with `i < j`.
    pub all_pairs: Vec<f64>,
}

pub fn pairwise_l2_stats<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<PairwiseStats> {
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise statistics need >= 2 vectors, got {k}"
        )));
    }
    let mut all_pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let (a, b) = (embeddings[i].as_ref(), embeddings[j].as_ref());
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    got: b.len(),
                });
            }
            all_pairs.push(l2_dist(a, b));
        }
    }
    let mean = all_pairs.iter().sum::<f64>() / all_pairs.len() as f64;
    let max = all_pairs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PairwiseStats {
        mean,
        max,
        all_pairs,
    })
}
