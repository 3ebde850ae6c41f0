//! Prototype classifier: class means of the labeled support set, scored by
//! the difference of cosine similarities to the two prototypes.

use crate::error::{Error, Result};
use crate::numerics::{cosine, KahanSum};

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// Mean of positive support embeddings (zero when absent).
    pub p: Vec<f64>,
    /// Mean of No-Finding support embeddings (zero when absent).
    pub n: Vec<f64>,
    pub has_p: bool,
    pub has_n: bool,
}

fn compensated_mean<'a>(dim: usize, xs: impl Iterator<Item = &'a [f64]>) -> Result<(Vec<f64>, usize)> {
    let mut acc = vec![KahanSum::default(); dim];
    let mut count = 0usize;
    for x in xs {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(x) {
            a.add(*v);
        }
        count += 1;
    }
    let mean = if count == 0 {
        vec![0.0; dim]
    } else {
        acc.iter().map(|a| a.total() / count as f64).collect()
    };
    Ok((mean, count))
}

/// Fits both prototypes from `(embedding, label)` pairs.
///
/// A class with no support items gets a zero prototype and a cleared flag.
pub fn fit(support: &[(&[f64], u8)]) -> Result<Prototypes> {
    let dim = support
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::InvalidArgument("support set is empty".into()))?;
    let (p, np) = compensated_mean(dim, support.iter().filter(|(_, y)| *y == 1).map(|(x, _)| *x))?;
    let (n, nn) = compensated_mean(dim, support.iter().filter(|(_, y)| *y == 0).map(|(x, _)| *x))?;
    if np + nn != support.len() {
        return Err(Error::InvalidArgument("support labels must be 0 or 1".into()));
    }
    Ok(Prototypes {
        p,
        n,
        has_p: np > 0,
        has_n: nn > 0,
    })
}

/// `cos(x, p) - cos(x, n)`; a missing class contributes 0 to its term.
pub fn score(protos: &Prototypes, x: &[f64]) -> Result<f64> {
    if x.len() != protos.p.len() {
        return Err(Error::DimensionMismatch {
            expected: protos.p.len(),
            got: x.len(),
        });
    }
    let pos = if protos.has_p { cosine(x, &protos.p)? } else { 0.0 };
    let neg = if protos.has_n { cosine(x, &protos.n)? } else { 0.0 };
    Ok(pos - neg)
}

pub fn score_query<V: AsRef<[f64]>>(protos: &Prototypes, query: &[V]) -> Result<Vec<f64>> {
    query.iter().map(|x| score(protos, x.as_ref())).collect()
}
