//! Datasets, ingestion, non-IID partitioning and trigger poisoning.

mod partition;
mod poison;
mod synthetic;
mod table;

pub use partition::{dirichlet_partition, stratified_split};
pub use poison::{embed_trigger, poison_all, select_poison, split_poison, TriggerSpec};
pub use synthetic::gen_synthetic;
pub use table::{load_table, write_table, ColumnScale, LoadedTable, TableSchema};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labeled examples with features in `[0,1]^dim` and labels below
/// `num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::dim(format!(
                    "example {i} has {} features, expected {dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::Index(format!("example {i} label {} ≥ {num_classes}", ex.label)));
            }
            if ex.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("example {i} has a feature outside [0,1]")));
            }
        }
        Ok(Dataset { examples, num_classes, dim })
    }

    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Dataset { examples: Vec::new(), num_classes, dim }
    }

    pub(crate) fn from_parts_unchecked(examples: Vec<Example>, num_classes: usize, dim: usize) -> Self {
        Dataset { examples, num_classes, dim }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    /// Concatenation of `self` and `other`, in that order.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim || self.num_classes != other.num_classes {
            return Err(Error::dim("concatenating datasets with different layouts"));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(Dataset { examples, ..*self })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            ..*self
        }
    }

    /// Features of the listed examples as an `[n×dim]` matrix.
    pub fn feature_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.examples[i].features);
        }
        Tensor::matrix(indices.len(), self.dim, data)
    }

    pub fn all_features(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.feature_matrix(&idx)
    }
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
