use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ItemStore, NO_FINDING};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

/// One episode: a condition, an unlabeled pool and a labeled query set,
/// all referenced by item id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: u64,
    pub split: SplitKind,
    pub condition: u32,
    pub holdout: bool,
    pub pool: Vec<u64>,
    pub query: Vec<u64>,
    /// Presentation order of pool positions for sequence-model selectors.
    pub order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub holdout_conditions: Vec<u32>,
    pub pool_size: usize,
    pub query_size: usize,
    /// Fraction of positives in each pool and query set (rounded up).
    pub balance: f64,
    /// Fractions of items assigned to the train/val/test partitions.
    pub item_fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_tasks: 600,
            val_tasks: 100,
            test_tasks: 200,
            holdout_conditions: vec![6, 7],
            pool_size: 100,
            query_size: 100,
            balance: 0.5,
            item_fractions: [0.6, 0.15, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSplit {
    pub meta_train: Vec<Task>,
    pub meta_val: Vec<Task>,
    pub meta_test: Vec<Task>,
    pub holdout_conditions: BTreeSet<u32>,
}

impl EpisodeSplit {
    pub fn tasks(&self, kind: SplitKind) -> &[Task] {
        match kind {
            SplitKind::Train => &self.meta_train,
            SplitKind::Val => &self.meta_val,
            SplitKind::Test => &self.meta_test,
        }
    }
}

fn positives_for(n: usize, balance: f64) -> usize {
    ((n as f64 * balance).ceil() as usize).min(n)
}

struct Partition {
    positives: Vec<Vec<u64>>,
    negatives: Vec<u64>,
}

/// Builds train/val/test task collections.
///
/// Items are first partitioned between the three splits, so no item id is
/// shared across splits. Meta-train and meta-val draw conditions from the
/// non-holdout set; the first half of meta-test uses non-holdout conditions
/// and the second half holdout conditions.
pub fn build_split(store: &ItemStore, cfg: &SplitConfig, rng: &mut SeededRng) -> Result<EpisodeSplit> {
    if cfg.pool_size == 0 || cfg.query_size == 0 {
        return Err(Error::Config("pool_size and query_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.balance) {
        return Err(Error::Config(format!("balance {} outside [0, 1]", cfg.balance)));
    }
    let fsum: f64 = cfg.item_fractions.iter().sum();
    if cfg.item_fractions.iter().any(|f| *f < 0.0) || !(fsum > 0.0) {
        return Err(Error::Config("item_fractions must be nonnegative with positive sum".into()));
    }
    let holdouts: BTreeSet<u32> = cfg.holdout_conditions.iter().copied().collect();
    if let Some(h) = holdouts.iter().find(|&&h| h >= store.n_conditions()) {
        return Err(Error::Config(format!(
            "holdout condition {h} not in dataset ({} conditions)",
            store.n_conditions()
        )));
    }
    let seen: Vec<u32> = (0..store.n_conditions())
        .filter(|c| !holdouts.contains(c))
        .collect();
    let unseen: Vec<u32> = holdouts.iter().copied().collect();
    if seen.is_empty() {
        return Err(Error::Config("every condition is a holdout condition".into()));
    }

    let nc = store.n_conditions() as usize;
    let mut parts: Vec<Partition> = (0..3)
        .map(|_| Partition {
            positives: vec![Vec::new(); nc],
            negatives: Vec::new(),
        })
        .collect();
    let mut assign_rng = rng.child(&[0x5917]);
    let cut0 = cfg.item_fractions[0] / fsum;
    let cut1 = cut0 + cfg.item_fractions[1] / fsum;
    for item in store.items() {
        let u = assign_rng.uniform();
        let p = if u < cut0 {
            0
        } else if u < cut1 {
            1
        } else {
            2
        };
        if item.condition == NO_FINDING {
            parts[p].negatives.push(item.item_id);
        } else {
            parts[p].positives[item.condition as usize].push(item.item_id);
        }
    }

    let pool_pos = positives_for(cfg.pool_size, cfg.balance);
    let query_pos = positives_for(cfg.query_size, cfg.balance);
    let need_pos = pool_pos + query_pos;
    let need_neg = cfg.pool_size - pool_pos + cfg.query_size - query_pos;

    let mut next_id = 0u64;
    let mut build = |kind: SplitKind, count: usize| -> Result<Vec<Task>> {
        let part = &parts[kind as usize];
        let mut task_rng = rng.child(&[0x7A5C, kind as u64]);
        let n_holdout = if kind == SplitKind::Test && !unseen.is_empty() {
            count / 2
        } else {
            0
        };
        let mut tasks = Vec::with_capacity(count);
        for t in 0..count {
            let holdout = t >= count - n_holdout;
            let choices = if holdout { &unseen } else { &seen };
            let condition = choices[task_rng.index(choices.len())];
            let pos = &part.positives[condition as usize];
            if pos.len() < need_pos {
                return Err(Error::Data(format!(
                    "condition {condition} has {} positive items in the {} partition, {need_pos} needed per task",
                    pos.len(),
                    kind.name()
                )));
            }
            if part.negatives.len() < need_neg {
                return Err(Error::Data(format!(
                    "No-Finding has {} items in the {} partition, {need_neg} needed per task",
                    part.negatives.len(),
                    kind.name()
                )));
            }
            let p_idx = task_rng.choose_distinct(pos.len(), need_pos);
            let n_idx = task_rng.choose_distinct(part.negatives.len(), need_neg);
            let n_pool_neg = cfg.pool_size - pool_pos;
            let mut pool: Vec<u64> = p_idx[..pool_pos]
                .iter()
                .map(|&i| pos[i])
                .chain(n_idx[..n_pool_neg].iter().map(|&i| part.negatives[i]))
                .collect();
            let mut query: Vec<u64> = p_idx[pool_pos..]
                .iter()
                .map(|&i| pos[i])
                .chain(n_idx[n_pool_neg..].iter().map(|&i| part.negatives[i]))
                .collect();
            task_rng.shuffle(&mut pool);
            task_rng.shuffle(&mut query);
            let order = task_rng.permutation(cfg.pool_size);
            tasks.push(Task {
                task_id: next_id,
                split: kind,
                condition,
                holdout,
                pool,
                query,
                order,
            });
            next_id += 1;
        }
        Ok(tasks)
    };
    let meta_train = build(SplitKind::Train, cfg.train_tasks)?;
    let meta_val = build(SplitKind::Val, cfg.val_tasks)?;
    let meta_test = build(SplitKind::Test, cfg.test_tasks)?;
    Ok(EpisodeSplit {
        meta_train,
        meta_val,
        meta_test,
        holdout_conditions: holdouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_synthetic_dataset, SynthConfig};
    use std::collections::{HashMap, HashSet};

    fn store() -> ItemStore {
        let cfg = SynthConfig {
            n_conditions: 4,
            positives_per_condition: 600,
            no_finding_items: 1800,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg, &mut SeededRng::new(21)).unwrap()
    }

    fn cfg() -> SplitConfig {
        SplitConfig {
            train_tasks: 100,
            val_tasks: 20,
            test_tasks: 40,
            holdout_conditions: vec![3],
            pool_size: 40,
            query_size: 20,
            ..SplitConfig::default()
        }
    }

    #[test]
    fn holdout_counts_and_purity() {
        let s = store();
        let split = build_split(&s, &cfg(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(split.meta_test.iter().filter(|t| t.condition == 3).count(), 20);
        assert!(split.meta_test.iter().all(|t| t.holdout == (t.condition == 3)));
        assert!(split
            .meta_train
            .iter()
            .chain(&split.meta_val)
            .all(|t| t.condition != 3 && !t.holdout));
    }

    #[test]
    fn balance_and_disjointness() {
        let s = store();
        let split = build_split(
            &s,
            &SplitConfig {
                pool_size: 100,
                ..cfg()
            },
            &mut SeededRng::new(2),
        )
        .unwrap();
        let mut owner: HashMap<u64, SplitKind> = HashMap::new();
        for kind in SplitKind::ALL {
            for t in split.tasks(kind) {
                let pool: HashSet<u64> = t.pool.iter().copied().collect();
                assert_eq!(pool.len(), 100);
                assert!(t.query.iter().all(|q| !pool.contains(q)));
                let pos = t.pool.iter().filter(|&&id| s.get(id).unwrap().label == 1).count();
                assert_eq!(pos, 50);
                let qpos = t.query.iter().filter(|&&id| s.get(id).unwrap().label == 1).count();
                assert_eq!(qpos, 10);
                for id in t.pool.iter().chain(&t.query) {
                    let o = *owner.entry(*id).or_insert(kind);
                    assert_eq!(o, kind, "item {id} in two splits");
                    let item = s.get(*id).unwrap();
                    assert!(item.label == 0 || item.condition == t.condition);
                }
                let mut ord = t.order.clone();
                ord.sort_unstable();
                assert_eq!(ord, (0..100).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn odd_sizes_round_positives_up() {
        let s = store();
        let split = build_split(
            &s,
            &SplitConfig {
                pool_size: 7,
                query_size: 5,
                ..cfg()
            },
            &mut SeededRng::new(3),
        )
        .unwrap();
        for t in &split.meta_train {
            let pos = t.pool.iter().filter(|&&id| s.get(id).unwrap().label == 1).count();
            assert_eq!(pos, 4);
        }
    }

    #[test]
    fn deterministic() {
        let s = store();
        let a = build_split(&s, &cfg(), &mut SeededRng::new(9)).unwrap();
        let b = build_split(&s, &cfg(), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_items_name_condition() {
        let s = store();
        let e = build_split(
            &s,
            &SplitConfig {
                pool_size: 600,
                ..cfg()
            },
            &mut SeededRng::new(4),
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("condition"), "{e}");
    }

    #[test]
    fn manifest_round_trip() {
        let s = store();
        let split = build_split(&s, &cfg(), &mut SeededRng::new(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        crate::tasks::write_manifest(&split.meta_test, &p).unwrap();
        let back = crate::tasks::read_manifest(&p).unwrap();
        assert_eq!(back, split.meta_test);
    }
}
