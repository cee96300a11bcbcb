//! Datasets, loaders and non-IID client partitioning.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, parse_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use partition::{
    label_overlap, lognormal_allocate, mean_pairwise_overlap, partition_by_classes, write_manifest, Allocation, ClientShard,
    PartitionSpec, MAX_DRAW_ATTEMPTS,
};
pub use synthetic::gen_synthetic_blobs;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Labelled samples: one feature row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor2D,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("Dataset::new", format!("{} labels", features.rows()), format!("{} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Shifts and scales every feature column to zero mean and unit
    /// (population) variance. Constant columns are only centered.
    pub fn standardize(&mut self) {
        let (n, d) = self.features.shape();
        if n == 0 {
            return;
        }
        let data = self.features.as_mut_slice();
        for c in 0..d {
            let mean = (0..n).map(|r| data[r * d + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (data[r * d + c] - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for r in 0..n {
                data[r * d + c] = (data[r * d + c] - mean) * scale;
            }
        }
    }
}
