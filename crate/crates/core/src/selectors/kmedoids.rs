//! PAM k-medoids: greedy BUILD followed by best-improvement SWAP passes.

use crate::error::{Error, Result};
use crate::numerics::Mat64;

#[derive(Clone, Debug, PartialEq)]
pub struct PamResult {
    /// Medoid point indices, in the order BUILD/SWAP placed them.
    pub medoids: Vec<usize>,
    pub cost: f64,
    /// Cost after BUILD, then after every applied swap.
    pub cost_trace: Vec<f64>,
    pub swaps: usize,
}

/// Sum over points of the distance to the nearest medoid.
pub fn assignment_cost(dist: &Mat64, medoids: &[usize]) -> f64 {
    (0..dist.rows())
        .map(|i| {
            medoids
                .iter()
                .map(|&m| dist.get(i, m))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

struct Nearest {
    d1: Vec<f64>,
    near: Vec<usize>,
    d2: Vec<f64>,
}

fn nearest(dist: &Mat64, medoids: &[usize]) -> Nearest {
    let n = dist.rows();
    let mut out = Nearest {
        d1: vec![f64::INFINITY; n],
        near: vec![usize::MAX; n],
        d2: vec![f64::INFINITY; n],
    };
    for i in 0..n {
        for (slot, &m) in medoids.iter().enumerate() {
            let d = dist.get(i, m);
            if d < out.d1[i] {
                out.d2[i] = out.d1[i];
                out.d1[i] = d;
                out.near[i] = slot;
            } else if d < out.d2[i] {
                out.d2[i] = d;
            }
        }
    }
    out
}

/// Runs PAM on a square distance matrix. Ties resolve to the lowest index.
pub fn pam(dist: &Mat64, k: usize, max_iters: usize) -> Result<PamResult> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(Error::InvalidArgument("distance matrix must be square".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k-medoids needs 1 <= k <= N (k = {k}, N = {n})"
        )));
    }

    // BUILD
    let mut is_medoid = vec![false; n];
    let mut medoids = Vec::with_capacity(k);
    let first = (0..n)
        .map(|j| (j, (0..n).map(|i| dist.get(i, j)).sum::<f64>()))
        .fold((usize::MAX, f64::INFINITY), |best, (j, c)| if c < best.1 { (j, c) } else { best })
        .0;
    medoids.push(first);
    is_medoid[first] = true;
    let mut d1: Vec<f64> = (0..n).map(|i| dist.get(i, first)).collect();
    while medoids.len() < k {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for c in (0..n).filter(|&c| !is_medoid[c]) {
            let gain: f64 = (0..n).map(|i| (d1[i] - dist.get(i, c)).max(0.0)).sum();
            if gain > best.1 {
                best = (c, gain);
            }
        }
        let c = best.0;
        medoids.push(c);
        is_medoid[c] = true;
        for (i, di) in d1.iter_mut().enumerate() {
            *di = di.min(dist.get(i, c));
        }
    }

    let mut cost = assignment_cost(dist, &medoids);
    let mut cost_trace = vec![cost];
    let mut swaps = 0;
    // SWAP
    for _ in 0..max_iters {
        let nr = nearest(dist, &medoids);
        let mut best = (0usize, 0usize, 0.0f64);
        for (slot, _) in medoids.iter().enumerate() {
            for h in (0..n).filter(|&h| !is_medoid[h]) {
                let mut delta = 0.0;
                for o in 0..n {
                    let dh = dist.get(o, h);
                    delta += if nr.near[o] == slot {
                        dh.min(nr.d2[o]) - nr.d1[o]
                    } else {
                        (dh - nr.d1[o]).min(0.0)
                    };
                }
                if delta < best.2 {
                    best = (slot, h, delta);
                }
            }
        }
        let (slot, h, delta) = best;
        // only accept improvements that survive rounding
        if !(delta < -1e-12 * cost.max(1.0)) {
            break;
        }
        is_medoid[medoids[slot]] = false;
        is_medoid[h] = true;
        medoids[slot] = h;
        let new_cost = assignment_cost(dist, &medoids);
        debug_assert!(new_cost <= cost + 1e-9);
        cost = new_cost;
        cost_trace.push(cost);
        swaps += 1;
    }
    Ok(PamResult {
        medoids,
        cost,
        cost_trace,
        swaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn brute_force(dist: &Mat64, k: usize) -> (Vec<usize>, f64) {
        let n = dist.rows();
        let mut best = (Vec::new(), f64::INFINITY);
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let c = assignment_cost(dist, &combo);
            if c < best.1 {
                best = (combo.clone(), c);
            }
            // next combination in lexicographic order
            let mut i = k;
            while i > 0 && combo[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                return best;
            }
            combo[i - 1] += 1;
            for j in i..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }

    fn points(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn k_equals_n_is_all_points() {
        let mut rng = SeededRng::new(1);
        let pts = points(&mut rng, 6, 2);
        let r = pam(&Mat64::pairwise_l2(&pts), 6, 100).unwrap();
        let mut m = r.medoids.clone();
        m.sort_unstable();
        assert_eq!(m, (0..6).collect::<Vec<_>>());
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn two_blobs_one_medoid_each() {
        let mut rng = SeededRng::new(2);
        let mut pts = Vec::new();
        for c in [[0.0, 0.0], [20.0, 20.0]] {
            for _ in 0..6 {
                pts.push(vec![c[0] + rng.normal(), c[1] + rng.normal()]);
            }
        }
        let dist = Mat64::pairwise_l2(&pts);
        let r = pam(&dist, 2, 100).unwrap();
        let mut m = r.medoids.clone();
        m.sort_unstable();
        assert!(m[0] < 6 && m[1] >= 6);
        assert_eq!(m, brute_force(&dist, 2).0);
    }

    #[test]
    fn duplicated_points_double_the_cost() {
        let mut rng = SeededRng::new(3);
        let pts = points(&mut rng, 5, 2);
        let doubled: Vec<Vec<f64>> = pts.iter().chain(pts.iter()).cloned().collect();
        let (_, single_opt) = brute_force(&Mat64::pairwise_l2(&pts), 2);
        let r = pam(&Mat64::pairwise_l2(&doubled), 2, 100).unwrap();
        assert!((r.cost - 2.0 * single_opt).abs() < 1e-12);
        let (_, double_opt) = brute_force(&Mat64::pairwise_l2(&doubled), 2);
        assert!((double_opt - 2.0 * single_opt).abs() < 1e-12);
    }

    #[test]
    fn swap_result_is_a_local_optimum_bounded_by_exhaustive() {
        let mut rng = SeededRng::new(4);
        let mut matched = 0;
        for _ in 0..50 {
            let n = 4 + rng.index(9);
            let k = 1 + rng.index(3.min(n));
            let pts = points(&mut rng, n, 2);
            let dist = Mat64::pairwise_l2(&pts);
            let r = pam(&dist, k, 100).unwrap();
            let (opt, opt_cost) = brute_force(&dist, k);
            assert!(r.cost >= opt_cost - 1e-12);
            assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0]));
            for slot in 0..k {
                for h in (0..n).filter(|h| !r.medoids.contains(h)) {
                    let mut m = r.medoids.clone();
                    m[slot] = h;
                    assert!(assignment_cost(&dist, &m) >= r.cost - 1e-12);
                }
            }
            let mut m = r.medoids.clone();
            m.sort_unstable();
            matched += usize::from(m == opt);
        }
        assert!(matched > 40, "{matched}");
    }

    #[test]
    fn rejects_bad_k() {
        let dist = Mat64::pairwise_l2(&[vec![0.0], vec![1.0]]);
        assert!(pam(&dist, 3, 10).is_err());
        assert!(pam(&dist, 0, 10).is_err());
    }
}
