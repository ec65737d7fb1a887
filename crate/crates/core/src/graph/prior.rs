use serde::{Deserialize, Serialize};

use crate::data::{AttributeMap, Corpus, DenseLabels, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Conditional co-occurrence of attributes over labelled frames:
/// `p[i][j] = counts[i][j] / totals[i]`, or 0 when attribute `i` never occurs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrencePrior {
    pub attributes: usize,
    /// Row-major `N × N` frame counts where both attributes are active.
    pub counts: Vec<u64>,
    /// Frames where each attribute is active.
    pub totals: Vec<u64>,
    pub p: Vec<f64>,
}

impl CoOccurrencePrior {
    pub fn from_counts(attributes: usize, counts: Vec<u64>, totals: Vec<u64>) -> Self {
        let p = (0..attributes * attributes)
            .map(|k| {
                let g = totals[k / attributes];
                if g == 0 {
                    0.0
                } else {
                    counts[k] as f64 / g as f64
                }
            })
            .collect();
        Self {
            attributes,
            counts,
            totals,
            p,
        }
    }

    /// A prior that contributes nothing to the adjacency.
    pub fn empty(attributes: usize) -> Self {
        Self::from_counts(attributes, vec![0; attributes * attributes], vec![0; attributes])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.attributes + j]
    }

    pub fn tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new([self.attributes, self.attributes], self.p.iter().map(|&v| S::of(v)).collect())
            .expect("square prior")
    }

    /// New attribute `i` is old attribute `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.attributes;
        let counts = (0..n * n).map(|k| self.counts[perm[k / n] * n + perm[k % n]]).collect();
        let totals = perm.iter().map(|&i| self.totals[i]).collect();
        Self::from_counts(n, counts, totals)
    }
}

/// Counts attribute co-occurrence frame by frame over `labels`, where a
/// frame's active attributes are the union over its active classes.
pub fn build_prior<'a>(
    labels: impl IntoIterator<Item = &'a DenseLabels>,
    map: &AttributeMap,
    attributes: usize,
) -> Result<CoOccurrencePrior> {
    map.validate(attributes)?;
    let n = attributes;
    let mut counts = vec![0u64; n * n];
    let mut totals = vec![0u64; n];
    let mut active = Vec::with_capacity(n);
    for dense in labels {
        if dense.classes != map.class_count() {
            return Err(Error::Bounds(format!(
                "labels have {} classes, the attribute map {}",
                dense.classes,
                map.class_count()
            )));
        }
        for t in 0..dense.frames {
            let on = map.active_attributes(dense.row(t), n);
            active.clear();
            active.extend((0..n).filter(|&a| on[a]));
            for &i in &active {
                totals[i] += 1;
                for &j in &active {
                    counts[i * n + j] += 1;
                }
            }
        }
    }
    Ok(CoOccurrencePrior::from_counts(n, counts, totals))
}

/// Prior over the corpus's train split.
pub fn corpus_prior(corpus: &Corpus) -> Result<CoOccurrencePrior> {
    build_prior(
        corpus.split(Split::Train).map(|v| &v.dense),
        &corpus.attribute_map,
        corpus.attribute_count(),
    )
}
