//! Fixed-capacity FIFO memory of momentum features and predictions.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Entry {
    feature: Vec<f64>, // unit norm
    probs: Vec<f64>,
    entry_id: u64,
}

/// Ring buffer of `(feature, probs)` pairs with strictly increasing entry ids.
/// When full, the oldest entries are evicted first.
#[derive(Clone, Debug)]
pub struct MemoryQueue {
    capacity: usize,
    feature_dim: usize,
    num_classes: usize,
    entries: VecDeque<Entry>,
    next_id: u64,
}

impl MemoryQueue {
    pub fn new(capacity: usize, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 || feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config(format!(
                "queue dims: capacity={capacity}, d={feature_dim}, c={num_classes}"
            )));
        }
        Ok(MemoryQueue {
            capacity,
            feature_dim,
            num_classes,
            entries: VecDeque::with_capacity(capacity),
            next_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a batch of `(feature, probs)` rows, normalizing features
    /// (idempotent for already-unit rows) and evicting oldest entries past
    /// capacity. Returns the assigned entry ids in row order.
    pub fn enqueue(&mut self, features: &Tensor, probs: &Tensor) -> Result<Vec<u64>> {
        if features.shape().len() != 2 || features.cols() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "enqueue features: expected [n x {}], got {:?}",
                self.feature_dim,
                features.shape()
            )));
        }
        if probs.shape().len() != 2
            || probs.cols() != self.num_classes
            || probs.rows() != features.rows()
        {
            return Err(Error::Dimension(format!(
                "enqueue probs: expected [{} x {}], got {:?}",
                features.rows(),
                self.num_classes,
                probs.shape()
            )));
        }
        let mut ids = Vec::with_capacity(features.rows());
        for i in 0..features.rows() {
            let row = features.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "enqueue: feature row {i} has norm {norm:.3e} < 1e-12"
                )));
            }
            let feature: Vec<f64> = row.iter().map(|v| v / norm).collect();
            let id = self.next_id;
            self.next_id += 1;
            self.entries.push_back(Entry { feature, probs: probs.row(i).to_vec(), entry_id: id });
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Immutable copy of the queue contents in insertion order.
    pub fn snapshot(&self) -> QueueSnapshot {
        let n = self.entries.len();
        let mut features = Vec::with_capacity(n * self.feature_dim);
        let mut probs = Vec::with_capacity(n * self.num_classes);
        let mut entry_ids = Vec::with_capacity(n);
        for e in &self.entries {
            features.extend_from_slice(&e.feature);
            probs.extend_from_slice(&e.probs);
            entry_ids.push(e.entry_id);
        }
        QueueSnapshot {
            features: Tensor::new(features, vec![n, self.feature_dim]).unwrap(),
            probs: Tensor::new(probs, vec![n, self.num_classes]).unwrap(),
            entry_ids,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

/// Read view of the queue: no gradients attach, mutation does not feed back.
#[derive(Clone, Debug)]
pub struct QueueSnapshot {
    pub features: Tensor, // [len x d], unit rows
    pub probs: Tensor,    // [len x c]
    pub entry_ids: Vec<u64>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl QueueSnapshot {
    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    /// Argmax class of each stored probability row (ties to lowest index).
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.probs.row(i))).collect()
    }
}

/// Index of the row maximum, ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
