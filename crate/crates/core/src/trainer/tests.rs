use super::*;
use crate::numerics::finite_diff_grad_5pt;
use crate::selectors::selection_log_prob;
use crate::tasks::{build_split, generate_synthetic_dataset, ClinicalFeatures, LabeledEmbedding, SplitConfig, SplitKind, SynthConfig, NO_FINDING};

fn small_world() -> (ItemStore, EpisodeSplit) {
    let store = generate_synthetic_dataset(
        &SynthConfig {
            dim: 4,
            n_conditions: 3,
            positives_per_condition: 300,
            no_finding_items: 900,
            ..SynthConfig::default()
        },
        &mut SeededRng::new(5),
    )
    .unwrap();
    let split = build_split(
        &store,
        &SplitConfig {
            train_tasks: 24,
            val_tasks: 6,
            test_tasks: 8,
            holdout_conditions: vec![2],
            pool_size: 20,
            query_size: 20,
            ..SplitConfig::default()
        },
        &mut SeededRng::new(6),
    )
    .unwrap();
    (store, split)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        epochs: 2,
        k: 4,
        val_every: 2,
        seed: 11,
        hidden: 4,
        ..TrainConfig::default()
    }
}

fn spec(strategy: Strategy, params: Option<&SelectorParams>, k: usize) -> EpisodeSpec<'_> {
    EpisodeSpec {
        strategy,
        params,
        k,
        baseline_draws: 1,
        greedy: false,
    }
}

#[test]
fn random_episode_is_deterministic() {
    let (store, split) = small_world();
    let task = &split.meta_train[0];
    let a = run_episode(&store, task, &spec(Strategy::Random, None, 5), &SeededRng::new(3)).unwrap();
    let b = run_episode(&store, task, &spec(Strategy::Random, None, 5), &SeededRng::new(3)).unwrap();
    assert_eq!(a.reward, b.reward);
    assert_eq!(a.outcome, b.outcome);
    assert!((0.0..=1.0).contains(&a.reward));
}

fn item(id: u64, e: Vec<f64>, label: u8) -> LabeledEmbedding {
    LabeledEmbedding {
        item_id: id,
        embedding: e,
        label,
        condition: if label == 1 { 0 } else { NO_FINDING },
        clinical: ClinicalFeatures {
            age: 50.0,
            sex: 0,
            laterality: 1,
        },
    }
}

#[test]
fn separable_task_reaches_auroc_one() {
    // positives near e1, negatives near e2 (orthogonal class means)
    let mut rng = SeededRng::new(9);
    let mut items = Vec::new();
    for id in 1..=40u64 {
        let label = (id % 2) as u8;
        let mut e = vec![0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal()];
        e[if label == 1 { 0 } else { 1 }] += 1.0;
        items.push(item(id, e, label));
    }
    let store = ItemStore::new(3, 1, items).unwrap();
    let task = Task {
        task_id: 0,
        split: SplitKind::Test,
        condition: 0,
        holdout: false,
        pool: (1..=20).collect(),
        query: (21..=40).collect(),
        order: (0..20).collect(),
    };
    let ep = run_episode(&store, &task, &spec(Strategy::KMedoids, None, 4), &SeededRng::new(1)).unwrap();
    let labels: Vec<u8> = ep.outcome.indices.iter().map(|&i| store.get(task.pool[i]).unwrap().label).collect();
    assert!(labels.contains(&0) && labels.contains(&1));
    assert_eq!(ep.reward, 1.0);
    let mut revealed = 0;
    assert_eq!(selection_reward(&store, &task, &[0, 1], &mut revealed).unwrap(), 1.0);
    assert_eq!(revealed, 2);
}

#[test]
fn single_label_support_is_well_defined() {
    let (store, split) = small_world();
    let params = SelectorParams::init(4, 4, &mut SeededRng::new(2));
    for t in &split.meta_train[..5] {
        let ep = run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), 1), &SeededRng::new(t.task_id)).unwrap();
        assert!((0.0..=1.0).contains(&ep.reward));
        assert!((0.0..=1.0).contains(&ep.baseline.unwrap()));
    }
}

#[test]
fn label_audit() {
    let (store, split) = small_world();
    let params = SelectorParams::init(4, 4, &mut SeededRng::new(2));
    let clin = SelectorParams::init(3, 4, &mut SeededRng::new(2));
    let t = &split.meta_train[0];
    let rng = SeededRng::new(4);
    let k = 6;
    let ep = run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), k), &rng).unwrap();
    assert_eq!(ep.labels_revealed, 2 * k);
    let ep = run_episode(&store, t, &spec(Strategy::Clinical, Some(&clin), k), &rng).unwrap();
    assert_eq!(ep.labels_revealed, 2 * k);
    let mut s = spec(Strategy::MedSelect, Some(&params), k);
    s.baseline_draws = 3;
    assert_eq!(run_episode(&store, t, &s, &rng).unwrap().labels_revealed, 4 * k);
    for strategy in [Strategy::Random, Strategy::KMedoids] {
        let mut s = spec(strategy, None, k);
        s.baseline_draws = 0;
        assert_eq!(run_episode(&store, t, &s, &rng).unwrap().labels_revealed, k);
    }
    assert!(run_episode(&store, t, &spec(Strategy::MedSelect, None, k), &rng).is_err());
}

#[test]
fn zero_advantage_leaves_params() {
    let (store, split) = small_world();
    let mut params = SelectorParams::init(4, 4, &mut SeededRng::new(2));
    let before = params.as_slice().to_vec();
    let tasks = &split.meta_train[..4];
    let pools: Vec<PoolView> = tasks.iter().map(|t| store.pool_view(t).unwrap()).collect();
    let mut eps: Vec<EpisodeResult> = tasks
        .iter()
        .map(|t| run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), 3), &SeededRng::new(t.task_id)).unwrap())
        .collect();
    eps.iter_mut().for_each(|e| e.advantage = 0.0);
    let mut adam = AdamState::new(params.len());
    policy_gradient_step(&mut params, &mut adam, &eps, &pools, FeatureKind::Embedding, &tiny_config()).unwrap();
    assert_eq!(params.as_slice(), &before[..]);
    assert_eq!(adam.step, 1);
}

#[test]
fn positive_advantage_raises_log_prob() {
    let (store, split) = small_world();
    let mut params = SelectorParams::init(4, 4, &mut SeededRng::new(2));
    let t = &split.meta_train[0];
    let pool = store.pool_view(t).unwrap();
    let mut ep = run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), 3), &SeededRng::new(1)).unwrap();
    ep.advantage = 0.5;
    let before = selection_log_prob(&params, FeatureKind::Embedding, &pool, &ep.outcome.indices).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        ..tiny_config()
    };
    let mut adam = AdamState::new(params.len());
    policy_gradient_step(&mut params, &mut adam, &[ep.clone()], std::slice::from_ref(&pool), FeatureKind::Embedding, &cfg).unwrap();
    let after = selection_log_prob(&params, FeatureKind::Embedding, &pool, &ep.outcome.indices).unwrap();
    assert!(after > before, "{after} <= {before}");
    // the old outcome is now stale
    assert!(matches!(
        batch_gradient(&params, FeatureKind::Embedding, &[ep], &[pool]),
        Err(Error::StaleOutcome { .. })
    ));
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let (store, split) = small_world();
    let params = SelectorParams::init(4, 3, &mut SeededRng::new(8));
    let tasks = &split.meta_train[..3];
    let pools: Vec<PoolView> = tasks.iter().map(|t| store.pool_view(t).unwrap()).collect();
    let mut eps: Vec<EpisodeResult> = tasks
        .iter()
        .map(|t| run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), 2), &SeededRng::new(t.task_id)).unwrap())
        .collect();
    for (e, a) in eps.iter_mut().zip([0.3, -0.2, 0.45]) {
        e.advantage = a;
    }
    let analytic = batch_gradient(&params, FeatureKind::Embedding, &eps, &pools).unwrap();
    let f = |theta: &[f64]| {
        let p = params.with_values(theta);
        eps.iter()
            .zip(&pools)
            .map(|(e, pool)| e.advantage * selection_log_prob(&p, FeatureKind::Embedding, pool, &e.outcome.indices).unwrap())
            .sum::<f64>()
            / 3.0
    };
    let numeric = finite_diff_grad_5pt(f, params.as_slice(), 3e-3).unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        if a.abs() > 1e-8 {
            assert!((a - n).abs() / a.abs().max(n.abs()) < 1e-5, "{a} vs {n}");
        }
    }
    // the traced and recomputed paths agree exactly
    let mut no_trace = eps.clone();
    no_trace.iter_mut().for_each(|e| e.trace = None);
    assert_eq!(batch_gradient(&params, FeatureKind::Embedding, &no_trace, &pools).unwrap(), analytic);
}

#[test]
fn non_finite_gradient_aborts_with_batch_ids() {
    let (store, split) = small_world();
    let mut params = SelectorParams::init(4, 4, &mut SeededRng::new(2));
    let t = &split.meta_train[0];
    let pool = store.pool_view(t).unwrap();
    let mut ep = run_episode(&store, t, &spec(Strategy::MedSelect, Some(&params), 3), &SeededRng::new(1)).unwrap();
    ep.advantage = f64::NAN;
    let mut adam = AdamState::new(params.len());
    match policy_gradient_step(&mut params, &mut adam, &[ep], &[pool], FeatureKind::Embedding, &tiny_config()) {
        Err(Error::NumericalAbort { step, task_ids, params: dump }) => {
            assert_eq!(step, 1);
            assert_eq!(task_ids, vec![t.task_id]);
            assert_eq!(dump.len(), params.len());
        }
        other => panic!("expected abort, got {other:?}"),
    }
    assert_eq!(adam.step, 0);
}

#[test]
fn uniform_policy_validates_like_random() {
    let (store, split) = small_world();
    let zero = SelectorParams::zeros(4, 4);
    let tasks: Vec<Task> = split.meta_train.iter().chain(&split.meta_test).cloned().collect();
    let v = meta_validate(&store, &tasks, &spec(Strategy::MedSelect, Some(&zero), 4), 77).unwrap();
    assert_eq!(v, meta_validate(&store, &tasks, &spec(Strategy::MedSelect, Some(&zero), 4), 77).unwrap());
    let r = meta_validate(&store, &tasks, &spec(Strategy::Random, None, 4), 78).unwrap();
    let rewards: Vec<f64> = tasks
        .iter()
        .map(|t| run_episode(&store, t, &spec(Strategy::Random, None, 4), &SeededRng::new(t.task_id + 500)).unwrap().reward)
        .collect();
    let n = rewards.len() as f64;
    let m = rewards.iter().sum::<f64>() / n;
    let sd = (rewards.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((v - r).abs() < 4.0 * sd * (2.0 / n).sqrt(), "{v} vs {r}");
}

#[test]
fn uniform_policy_advantage_is_centered() {
    let (store, split) = small_world();
    let zero = SelectorParams::zeros(4, 4);
    let tasks: Vec<&Task> = split.meta_train.iter().chain(&split.meta_val).chain(&split.meta_test).collect();
    let mut adv = Vec::new();
    for rep in 0..15u64 {
        for t in &tasks {
            let ep = run_episode(&store, t, &spec(Strategy::MedSelect, Some(&zero), 4), &SeededRng::new(derive_seed(rep, &[t.task_id]))).unwrap();
            adv.push(ep.advantage);
        }
    }
    let n = adv.len() as f64;
    let m = adv.iter().sum::<f64>() / n;
    let se = (adv.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    assert!(n >= 500.0);
    assert!(m.abs() < 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn zero_epochs_and_zero_lr() {
    let (store, split) = small_world();
    let out = train(&TrainConfig { epochs: 0, ..tiny_config() }, &store, &split, Strategy::MedSelect, |_| Ok(())).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.final_params, out.initial);
    assert_eq!(out.best, out.initial);
    let out = train(&TrainConfig { learning_rate: 0.0, ..tiny_config() }, &store, &split, Strategy::MedSelect, |_| Ok(())).unwrap();
    assert_eq!(out.final_params.as_slice(), out.initial.as_slice());
    assert!(train(&tiny_config(), &store, &split, Strategy::Random, |_| Ok(())).is_err());
}

#[test]
fn training_log_shape_and_bounds() {
    let (store, split) = small_world();
    let mut streamed = Vec::new();
    let out = train(&tiny_config(), &store, &split, Strategy::Clinical, |r| {
        streamed.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(streamed, out.log);
    // 24 tasks / batch 8 = 3 updates per epoch, plus the initial validation
    assert_eq!(out.log.len(), 7);
    assert_eq!(out.log[0].step, 0);
    assert!(out.log[0].val_reward.is_some());
    let vals: Vec<u64> = out.log.iter().filter(|r| r.val_reward.is_some()).map(|r| r.step).collect();
    assert_eq!(vals, vec![0, 2, 4, 6]);
    for r in &out.log[1..] {
        assert!((0.0..=1.0).contains(&r.mean_r.unwrap()));
        assert!((0.0..=1.0).contains(&r.mean_b.unwrap()));
        assert!(r.wall_ms.is_none());
    }
    let best = out.log.iter().filter_map(|r| r.val_reward).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val, Some(best));
    assert_eq!(out.adam.step, 6);
    assert_eq!(out.final_params.version(), out.initial.version() + 6);
}

#[test]
fn training_is_reproducible_across_worker_counts() {
    let (store, split) = small_world();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&tiny_config(), &store, &split, Strategy::MedSelect, |_| Ok(())).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.best, b.best);
    assert_eq!(a.adam, b.adam);
}

#[test]
fn log_record_json_names() {
    let r = LogRecord {
        step: 3,
        epoch: Some(0),
        mean_r: Some(0.7),
        mean_b: Some(0.6),
        mean_adv: Some(0.1),
        grad_norm: None,
        val_reward: None,
        wall_ms: None,
    };
    let s = serde_json::to_string(&r).unwrap();
    assert_eq!(s, r#"{"step":3,"epoch":0,"mean_R":0.7,"mean_b":0.6,"mean_adv":0.1}"#);
    assert_eq!(serde_json::from_str::<LogRecord>(&s).unwrap(), r);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() },
        TrainConfig { baseline_draws: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 0.1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"k": 5}"#).unwrap();
    assert_eq!(c.k, 5);
    assert_eq!(c.batch_size, 64);
}
