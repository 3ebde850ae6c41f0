use std::collections::HashMap;

use super::*;
use crate::numerics::finite_diff_grad;
use crate::tasks::ClinicalFeatures;

fn rand_points(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[test]
fn random_k_equals_n() {
    let pts = rand_points(&mut SeededRng::new(1), 7, 2);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let out = random_select(&pool, 7, &mut SeededRng::new(2)).unwrap();
    assert_eq!(sorted(out.indices), (0..7).collect::<Vec<_>>());
    assert_eq!(out.total_logp, 0.0);
}

#[test]
fn random_logp_is_set_probability() {
    let pts = rand_points(&mut SeededRng::new(1), 10, 2);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let out = random_select(&pool, 3, &mut SeededRng::new(2)).unwrap();
    assert!((out.total_logp - (1.0f64 / 120.0).ln()).abs() < 1e-12);
    let s: f64 = out.per_draw_logp.iter().sum();
    assert!((s - out.total_logp).abs() < 1e-12);
    assert!(random_select(&pool, 11, &mut SeededRng::new(2)).is_err());
}

#[test]
fn random_is_uniform_and_deterministic() {
    let pts = rand_points(&mut SeededRng::new(3), 20, 2);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let (n, k, trials) = (20usize, 5usize, 100_000usize);
    let mut counts = vec![0usize; n];
    let mut rng = SeededRng::new(4);
    for _ in 0..trials {
        for i in random_select(&pool, k, &mut rng).unwrap().indices {
            counts[i] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - trials as f64 * p).abs() < 3.5 * sigma, "{c}");
    }
    let a = random_select(&pool, k, &mut SeededRng::new(5)).unwrap();
    let b = random_select(&pool, k, &mut SeededRng::new(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kmedoids_is_permutation_equivariant() {
    let mut rng = SeededRng::new(6);
    let pts = rand_points(&mut rng, 30, 3);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let base = kmedoids_select(&pool, 4, 100).unwrap();
    let perm = rng.permutation(30);
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
    let ppool = PoolView::from_embeddings(&permuted).unwrap();
    let out = kmedoids_select(&ppool, 4, 100).unwrap();
    let mapped = sorted(out.indices.iter().map(|&i| perm[i]).collect());
    assert_eq!(mapped, sorted(base.indices.clone()));
    assert_eq!(base.total_logp, 0.0);
    let all = kmedoids_select(&pool, 30, 100).unwrap();
    assert_eq!(sorted(all.indices), (0..30).collect::<Vec<_>>());
}

#[test]
fn selectors_return_distinct_in_range_indices() {
    let mut rng = SeededRng::new(7);
    let pts = rand_points(&mut rng, 25, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::init(4, 6, &mut rng);
    let clin = SelectorParams::init(3, 6, &mut rng);
    let selectors: Vec<Box<dyn Selector>> = vec![
        Box::new(RandomSelector),
        Box::new(KMedoidsSelector::default()),
        Box::new(PolicySelector { params: &params, features: FeatureKind::Embedding, greedy: false }),
        Box::new(PolicySelector { params: &params, features: FeatureKind::Embedding, greedy: true }),
        Box::new(PolicySelector { params: &clin, features: FeatureKind::Clinical, greedy: false }),
    ];
    for s in &selectors {
        for k in [1, 5, 25] {
            let out = s.select(&pool, k, &mut rng).unwrap();
            assert_eq!(out.indices.len(), k);
            assert_eq!(sorted(out.indices.clone()).windows(2).filter(|w| w[0] == w[1]).count(), 0);
            assert!(out.indices.iter().all(|&i| i < 25));
            assert_eq!(out.per_draw_logp.len(), k);
        }
    }
}

#[test]
fn medselect_single_item_pool() {
    let mut rng = SeededRng::new(8);
    let pts = rand_points(&mut rng, 1, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::init(4, 5, &mut rng);
    let out = medselect_select(&params, &pool, 1, &mut rng).unwrap();
    assert_eq!(out.indices, vec![0]);
    assert_eq!(out.total_logp, 0.0);
}

#[test]
fn zero_params_select_uniformly() {
    let mut rng = SeededRng::new(9);
    let pts = rand_points(&mut rng, 6, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::zeros(4, 5);
    let trace = policy_logits(&params, FeatureKind::Embedding, &pool).unwrap();
    for p in softmax(&trace.logits) {
        assert!((p - 1.0 / 6.0).abs() < 1e-15);
    }
}

/// Forward direction copies `x[0]` into the hidden state; the head reads it
/// with a large weight, so the item with the largest first coordinate
/// dominates the logits.
fn dominant_params(d: usize, h: usize) -> SelectorParams {
    let mut p = SelectorParams::zeros(d, h);
    p.block_mut(ParamBlock::InputWeights)[0] = 1.0; // z[0] = x[0]
    let gw = p.block_mut(ParamBlock::GateWeights(0));
    gw[2 * h * h] = 4.0; // cell candidate unit 0 reads z[0]
    let gb = p.block_mut(ParamBlock::GateBias(0));
    gb[0] = 30.0; // input gate open
    gb[h] = -30.0; // forget gate closed
    gb[3 * h] = 30.0; // output gate open
    p.block_mut(ParamBlock::HeadWeights)[0] = 40.0;
    p
}

#[test]
fn dominant_logit_is_almost_always_chosen() {
    let mut rng = SeededRng::new(10);
    let mut pts = rand_points(&mut rng, 8, 3);
    for p in pts.iter_mut() {
        p[0] = 0.0;
    }
    pts[5][0] = 3.0;
    let pool = PoolView::new(
        pts.iter().map(|p| p.as_slice()).collect(),
        vec![ClinicalFeatures { age: 40.0, sex: 0, laterality: 1 }; 8],
        vec![3, 1, 7, 0, 5, 2, 6, 4],
    )
    .unwrap();
    let params = dominant_params(3, 4);
    let mut hits = 0;
    for _ in 0..10_000 {
        if medselect_select(&params, &pool, 1, &mut rng).unwrap().indices[0] == 5 {
            hits += 1;
        }
    }
    assert!(hits as f64 / 10_000.0 > 0.999, "{hits}");
    let all = medselect_select(&params, &pool, 8, &mut rng).unwrap();
    assert_eq!(sorted(all.indices), (0..8).collect::<Vec<_>>());
}

#[test]
fn set_frequencies_match_enumeration() {
    let mut rng = SeededRng::new(11);
    let pts = rand_points(&mut rng, 5, 3);
    let pool = PoolView::new(
        pts.iter().map(|p| p.as_slice()).collect(),
        vec![ClinicalFeatures { age: 40.0, sex: 0, laterality: 1 }; 5],
        vec![4, 0, 2, 1, 3],
    )
    .unwrap();
    let mut params = SelectorParams::init(3, 6, &mut rng);
    for w in params.block_mut(ParamBlock::HeadWeights) {
        *w *= 8.0;
    }
    let logits = policy_logits(&params, FeatureKind::Embedding, &pool).unwrap().logits;
    let p = softmax(&logits);
    let mut oracle: HashMap<(usize, usize), f64> = HashMap::new();
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                *oracle.entry((i.min(j), i.max(j))).or_default() += p[i] * p[j] / (1.0 - p[i]);
            }
        }
    }
    let trials = 200_000;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..trials {
        let o = medselect_select(&params, &pool, 2, &mut rng).unwrap();
        let (a, b) = (o.indices[0], o.indices[1]);
        *counts.entry((a.min(b), a.max(b))).or_default() += 1;
    }
    for (key, q) in oracle {
        let f = *counts.get(&key).unwrap_or(&0) as f64 / trials as f64;
        let sigma = (q * (1.0 - q) / trials as f64).sqrt();
        assert!((f - q).abs() < 4.0 * sigma + 1e-12, "{key:?}: {f} vs {q}");
    }
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = SeededRng::new(12);
    let pts = rand_points(&mut rng, 9, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::init(4, 5, &mut rng);
    let mut shifted = params.clone();
    shifted.block_mut(ParamBlock::HeadBias)[0] += 17.5;
    let a = softmax(&policy_logits(&params, FeatureKind::Embedding, &pool).unwrap().logits);
    let b = softmax(&policy_logits(&shifted, FeatureKind::Embedding, &pool).unwrap().logits);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identical_clinical_features_depend_only_on_position() {
    let mut rng = SeededRng::new(13);
    let pts = rand_points(&mut rng, 6, 4);
    let same = ClinicalFeatures { age: 61.0, sex: 1, laterality: 0 };
    let params = SelectorParams::init(3, 5, &mut rng);
    let order_a = vec![0, 1, 2, 3, 4, 5];
    let order_b = vec![5, 3, 1, 0, 2, 4];
    let pool_a = PoolView::new(pts.iter().map(|p| p.as_slice()).collect(), vec![same; 6], order_a.clone()).unwrap();
    let pool_b = PoolView::new(pts.iter().map(|p| p.as_slice()).collect(), vec![same; 6], order_b.clone()).unwrap();
    let la = policy_logits(&params, FeatureKind::Clinical, &pool_a).unwrap().logits;
    let lb = policy_logits(&params, FeatureKind::Clinical, &pool_b).unwrap().logits;
    for t in 0..6 {
        assert_eq!(la[order_a[t]], lb[order_b[t]]);
    }
    // with no parameters at all the distribution is uniform
    let zero = SelectorParams::zeros(3, 5);
    let p = softmax(&policy_logits(&zero, FeatureKind::Clinical, &pool_a).unwrap().logits);
    assert!(p.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));
    let out = clinical_select(&params, &pool_a, 6, &mut rng).unwrap();
    assert_eq!(sorted(out.indices), (0..6).collect::<Vec<_>>());
}

#[test]
fn per_draw_log_probs_match_sampler() {
    let mut rng = SeededRng::new(14);
    let pts = rand_points(&mut rng, 12, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::init(4, 6, &mut rng);
    let out = medselect_select(&params, &pool, 5, &mut rng).unwrap();
    let exact = selection_log_prob(&params, FeatureKind::Embedding, &pool, &out.indices).unwrap();
    assert!((exact - out.total_logp).abs() < 1e-12);
}

#[test]
fn backward_scale_zero_and_stale_outcome() {
    let mut rng = SeededRng::new(15);
    let pts = rand_points(&mut rng, 6, 4);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let mut params = SelectorParams::init(4, 8, &mut rng);
    let out = medselect_select(&params, &pool, 2, &mut rng).unwrap();
    let g = medselect_backward(&params, &pool, &out, 0.0).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
    params.update(|d| d[0] += 1e-3);
    assert!(matches!(
        medselect_backward(&params, &pool, &out, 1.0),
        Err(Error::StaleOutcome { .. })
    ));
    let random = random_select(&pool, 2, &mut rng).unwrap();
    assert!(medselect_backward(&params, &pool, &random, 1.0).is_err());
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = SeededRng::new(16);
    for _ in 0..3 {
        let pts = rand_points(&mut rng, 6, 4);
        let order = rng.permutation(6);
        let pool = PoolView::new(
            pts.iter().map(|p| p.as_slice()).collect(),
            vec![ClinicalFeatures { age: 40.0, sex: 0, laterality: 1 }; 6],
            order,
        )
        .unwrap();
        let params = SelectorParams::init(4, 8, &mut rng);
        let out = medselect_select(&params, &pool, 2, &mut rng).unwrap();
        let adv = 0.37;
        let analytic = medselect_backward(&params, &pool, &out, adv).unwrap();
        let f = |theta: &[f64]| {
            adv * selection_log_prob(&params.with_values(theta), FeatureKind::Embedding, &pool, &out.indices).unwrap()
        };
        let numeric = finite_diff_grad(f, params.as_slice(), 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8 + 1e-6 * a.abs(), "{a} vs {n}");
        }
    }
}

#[test]
fn k_equals_n_expected_gradient_vanishes() {
    // The ordered draw of all N items is random, but its set is not: the
    // probability-weighted sum of score functions over all N! orders is zero.
    let mut rng = SeededRng::new(17);
    let pts = rand_points(&mut rng, 3, 2);
    let pool = PoolView::from_embeddings(&pts).unwrap();
    let params = SelectorParams::init(2, 3, &mut rng);
    let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut total = vec![0.0; params.len()];
    let mut mass = 0.0;
    for ord in orders {
        let lp = selection_log_prob(&params, FeatureKind::Embedding, &pool, &ord).unwrap();
        let outcome = SelectionOutcome {
            indices: ord.to_vec(),
            per_draw_logp: vec![],
            total_logp: lp,
            params_version: Some(params.version()),
        };
        let g = medselect_backward(&params, &pool, &outcome, lp.exp()).unwrap();
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
        mass += lp.exp();
    }
    assert!((mass - 1.0).abs() < 1e-12);
    assert!(total.iter().all(|g| g.abs() < 1e-12), "{total:?}");
}


