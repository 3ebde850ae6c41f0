//! Meta-learning episodes: item stores, synthetic generation, ingestion and
//! holdout-aware train/val/test task splits.

mod io;
mod split;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_embedding_file, read_manifest, read_store, save_embedding_file, write_manifest,
    write_store, EMBEDDING_MAGIC,
};
pub use split::{build_split, EpisodeSplit, SplitConfig, SplitKind, Task};
pub use synth::{generate_synthetic_dataset, SynthConfig};

/// Condition id carried by No-Finding (label 0) items.
pub const NO_FINDING: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFeatures {
    /// Years, in `[0, 120]`.
    pub age: f64,
    /// 1 = female, 0 = male.
    pub sex: u8,
    /// 1 = frontal view, 0 = lateral view.
    pub laterality: u8,
}

impl ClinicalFeatures {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=120.0).contains(&self.age) {
            return Err(Error::Data(format!("age {} outside [0, 120]", self.age)));
        }
        if self.sex > 1 || self.laterality > 1 {
            return Err(Error::Data(format!(
                "sex/laterality must be 0 or 1, got {}/{}",
                self.sex, self.laterality
            )));
        }
        Ok(())
    }

    pub fn is_frontal(&self) -> bool {
        self.laterality == 1
    }

    pub fn is_female(&self) -> bool {
        self.sex == 1
    }
}

/// One embedded, labeled item.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub item_id: u64,
    pub embedding: Vec<f64>,
    pub label: u8,
    /// Condition the item is positive for, or [`NO_FINDING`].
    pub condition: u32,
    pub clinical: ClinicalFeatures,
}

/// Read-only collection of items with a uniform embedding dimension.
#[derive(Clone, Debug)]
pub struct ItemStore {
    dim: usize,
    n_conditions: u32,
    items: Vec<LabeledEmbedding>,
    by_id: HashMap<u64, usize>,
}

impl ItemStore {
    pub fn new(dim: usize, n_conditions: u32, items: Vec<LabeledEmbedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: item.embedding.len(),
                });
            }
            if let Some(j) = item.embedding.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "item index {i} (id {}) has non-finite embedding entry {j}",
                    item.item_id
                )));
            }
            match item.label {
                1 if item.condition < n_conditions => {}
                0 if item.condition == NO_FINDING => {}
                _ => {
                    return Err(Error::Data(format!(
                        "item index {i}: label {} with condition {}",
                        item.label, item.condition
                    )))
                }
            }
            item.clinical
                .validate()
                .map_err(|e| Error::Data(format!("item index {i}: {e}")))?;
            if by_id.insert(item.item_id, i).is_some() {
                return Err(Error::Data(format!("duplicate item id {}", item.item_id)));
            }
        }
        Ok(Self {
            dim,
            n_conditions,
            items,
            by_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_conditions(&self) -> u32 {
        self.n_conditions
    }

    pub fn items(&self) -> &[LabeledEmbedding] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: u64) -> Result<&LabeledEmbedding> {
        self.by_id
            .get(&id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
    }

    /// Label-free view of a task's pool, in pool order.
    pub fn pool_view(&self, task: &Task) -> Result<PoolView<'_>> {
        let mut embeddings = Vec::with_capacity(task.pool.len());
        let mut clinical = Vec::with_capacity(task.pool.len());
        for &id in &task.pool {
            let item = self.get(id)?;
            embeddings.push(item.embedding.as_slice());
            clinical.push(item.clinical);
        }
        PoolView::new(embeddings, clinical, task.order.clone())
    }

    /// Query embeddings and labels, in query order.
    pub fn query(&self, task: &Task) -> Result<(Vec<&[f64]>, Vec<u8>)> {
        let mut xs = Vec::with_capacity(task.query.len());
        let mut ys = Vec::with_capacity(task.query.len());
        for &id in &task.query {
            let item = self.get(id)?;
            xs.push(item.embedding.as_slice());
            ys.push(item.label);
        }
        Ok((xs, ys))
    }

    pub fn oracle<'a>(&'a self, task: &'a Task) -> LabelingOracle<'a> {
        LabelingOracle {
            store: self,
            task,
            revealed: 0,
        }
    }
}

/// Pool items as a selector sees them: embeddings and clinical features,
/// never labels.
#[derive(Clone, Debug)]
pub struct PoolView<'a> {
    embeddings: Vec<&'a [f64]>,
    clinical: Vec<ClinicalFeatures>,
    order: Vec<usize>,
}

impl<'a> PoolView<'a> {
    /// `order` is the presentation order for sequence models; it must be a
    /// permutation of `0..N`.
    pub fn new(
        embeddings: Vec<&'a [f64]>,
        clinical: Vec<ClinicalFeatures>,
        order: Vec<usize>,
    ) -> Result<Self> {
        let n = embeddings.len();
        if clinical.len() != n || order.len() != n {
            return Err(Error::InvalidArgument(format!(
                "pool view lengths disagree: {n} embeddings, {} clinical, {} order",
                clinical.len(),
                order.len()
            )));
        }
        let mut seen = vec![false; n];
        for &o in &order {
            if o >= n || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidArgument(
                    "presentation order is not a permutation".into(),
                ));
            }
        }
        if let Some(first) = embeddings.first() {
            let d = first.len();
            if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: bad.len(),
                });
            }
        }
        Ok(Self {
            embeddings,
            clinical,
            order,
        })
    }

    /// View in natural order with default clinical features.
    pub fn from_embeddings<V: AsRef<[f64]>>(embeddings: &'a [V]) -> Result<Self> {
        let n = embeddings.len();
        Self::new(
            embeddings.iter().map(|e| e.as_ref()).collect(),
            vec![
                ClinicalFeatures {
                    age: 50.0,
                    sex: 0,
                    laterality: 1,
                };
                n
            ],
            (0..n).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.len())
    }

    pub fn embeddings(&self) -> &[&'a [f64]] {
        &self.embeddings
    }

    pub fn clinical(&self) -> &[ClinicalFeatures] {
        &self.clinical
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// The only path from a pool position to its label. Counts every reveal.
pub struct LabelingOracle<'a> {
    store: &'a ItemStore,
    task: &'a Task,
    revealed: usize,
}

impl<'a> LabelingOracle<'a> {
    /// Labeled support items for the given pool positions.
    pub fn reveal(&mut self, indices: &[usize]) -> Result<Vec<(&'a [f64], u8)>> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let id = *self.task.pool.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("pool position {i} out of range"))
            })?;
            let item = self.store.get(id)?;
            out.push((item.embedding.as_slice(), item.label));
        }
        self.revealed += indices.len();
        Ok(out)
    }

    pub fn revealed(&self) -> usize {
        self.revealed
    }
}
