//! Balanced prototype-proximity pseudo-labeling.
//!
//! Each class prototype selects its k nearest queue entries by cosine
//! similarity; a sample is pseudo-labeled only if its own queue entry falls
//! in some prototype's candidate set and its momentum prediction clears the
//! confidence threshold. Selecting per-prototype rather than per-prediction
//! is what keeps the pseudo-label distribution close to uniform.

use crate::error::{Error, Result};
use crate::queue::{argmax, QueueSnapshot};
use crate::tensor::Tensor;

/// Pseudo-label decision for one unlabeled batch.
#[derive(Clone, Debug)]
pub struct PseudoDecision {
    /// Whether each sample receives a pseudo-label this step.
    pub mask: Vec<bool>,
    /// Assigned class, present exactly where `mask` is true.
    pub pseudo_labels: Vec<Option<usize>>,
    /// Number of queue candidates each prototype selected.
    pub per_class_candidate_count: Vec<usize>,
}

impl PseudoDecision {
    /// All-false decision for `n` samples and `c` classes (cold start or
    /// pseudo-labeling disabled).
    pub fn disabled(n: usize, c: usize) -> Self {
        PseudoDecision {
            mask: vec![false; n],
            pseudo_labels: vec![None; n],
            per_class_candidate_count: vec![0; c],
        }
    }

    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn mask_rate(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.mask.len() as f64
        }
    }

    /// Per-sample cross-entropy weights: 1 where masked, 0 elsewhere.
    pub fn weights(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Labels with unmasked slots filled by 0 (their weight is 0).
    pub fn labels_or_zero(&self) -> Vec<usize> {
        self.pseudo_labels.iter().map(|l| l.unwrap_or(0)).collect()
    }
}

/// For every class prototype, the entry ids of the `min(k, queue_size)`
/// queue features most cosine-similar to it. Ties break toward the larger
/// (more recent) entry id. An empty queue yields empty sets.
pub fn select_candidates(
    snapshot: &QueueSnapshot,
    prototypes: &Tensor,
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    if k == 0 {
        return Err(Error::Config("select_candidates: k must be positive".into()));
    }
    let c = prototypes.rows();
    let d = prototypes.cols();
    if d != snapshot.feature_dim {
        return Err(Error::Dimension(format!(
            "select_candidates: prototype dim {d} vs queue dim {}",
            snapshot.feature_dim
        )));
    }
    let m = snapshot.len();
    let mut sets = Vec::with_capacity(c);
    for class in 0..c {
        let proto = prototypes.row(class);
        let mut scored: Vec<(f64, u64)> = (0..m)
            .map(|i| {
                let sim: f64 =
                    snapshot.features.row(i).iter().zip(proto).map(|(a, b)| a * b).sum();
                (sim, snapshot.entry_ids[i])
            })
            .collect();
        // highest similarity first; equal similarity -> most recent id wins
        scored.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| b.1.cmp(&a.1))
        });
        let take = k.min(m);
        let mut ids: Vec<u64> = scored[..take].iter().map(|&(_, id)| id).collect();
        ids.sort_unstable();
        sets.push(ids);
    }
    Ok(sets)
}

/// Combines the kNN membership gate with the confidence gate.
///
/// `mask_j = (entry_id_j in union of candidate sets) AND (max p'_j >= tau)`;
/// the pseudo-label is the argmax of the stored momentum prediction.
pub fn assign(
    batch_probs: &Tensor,
    batch_entry_ids: &[u64],
    candidate_sets: &[Vec<u64>],
    conf_threshold: f64,
) -> Result<PseudoDecision> {
    let n = batch_probs.rows();
    if batch_entry_ids.len() != n {
        return Err(Error::Dimension(format!(
            "assign: {} entry ids for {n} probability rows",
            batch_entry_ids.len()
        )));
    }
    let mut union: Vec<u64> = candidate_sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();

    let mut mask = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = batch_probs.row(i);
        let best = argmax(row);
        let in_knn = union.binary_search(&batch_entry_ids[i]).is_ok();
        let confident = row[best] >= conf_threshold;
        let selected = in_knn && confident;
        mask.push(selected);
        labels.push(if selected { Some(best) } else { None });
    }
    Ok(PseudoDecision {
        mask,
        pseudo_labels: labels,
        per_class_candidate_count: candidate_sets.iter().map(Vec::len).collect(),
    })
}

/// Baseline rule: confidence gate only, no embedding-space selection.
pub fn assign_confidence_only(
    batch_probs: &Tensor,
    conf_threshold: f64,
    num_classes: usize,
) -> PseudoDecision {
    let n = batch_probs.rows();
    let mut mask = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = batch_probs.row(i);
        let best = argmax(row);
        let selected = row[best] >= conf_threshold;
        mask.push(selected);
        labels.push(if selected { Some(best) } else { None });
    }
    PseudoDecision { mask, pseudo_labels: labels, per_class_candidate_count: vec![0; num_classes] }
}
