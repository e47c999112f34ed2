//! Accuracy metrics and cluster-to-class labeling.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::series::ConfusionCounts;

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(alloc::format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionCounts> {
    check_lengths(pred, truth)?;
    let mut cm = ConfusionCounts::new(classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= classes || p >= classes {
            return Err(Error::LabelOutOfRange { label: t.max(p) + 1, classes });
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// Fraction of correct predictions.
pub fn overall_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Classes in `0..classes` with no sample in `truth`.
pub fn absent_classes(truth: &[usize], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for &t in truth {
        if t < classes {
            seen[t] = true;
        }
    }
    (0..classes).filter(|&c| !seen[c]).collect()
}

/// Per-class accuracy averaged over the classes present in `truth`.
pub fn mean_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let cm = confusion(pred, truth, classes)?;
    Ok(mean_accuracy_of(&cm)?)
}

pub fn mean_accuracy_of(cm: &ConfusionCounts) -> Result<f64> {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..cm.classes() {
        let support = cm.support(c);
        if support == 0 {
            log::warn!("class {} absent from the reference labels, dropped from mean accuracy", c + 1);
            continue;
        }
        sum += cm.true_positives(c) as f64 / support as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Empty("classes with samples"));
    }
    Ok(sum / present as f64)
}

fn modal(counts: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|b| n > counts[b]) {
            best = Some(c);
        }
    }
    best
}

/// Maps each cluster to its most frequent class among `labels`. Ties go to
/// the lowest class; empty clusters get the globally most frequent class.
pub fn label_clusters_majority(assign: &[usize], labels: &[usize], clusters: usize, classes: usize) -> Result<Vec<usize>> {
    check_lengths(assign, labels)?;
    let mut counts = vec![vec![0usize; classes]; clusters];
    let mut global = vec![0usize; classes];
    for (&a, &y) in assign.iter().zip(labels) {
        if a >= clusters {
            return Err(Error::InvalidArgument(alloc::format!("cluster index {a} >= {clusters}")));
        }
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y + 1, classes });
        }
        counts[a][y] += 1;
        global[y] += 1;
    }
    let fallback = modal(&global).ok_or(Error::Empty("labels"))?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            modal(c).unwrap_or_else(|| {
                log::warn!("cluster {k} is empty; labeled with the overall majority class");
                fallback
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Members with the lowest reconstruction error.
    Closest,
    /// Uniformly random members.
    Random,
}

/// Labels each cluster by the majority class of `per_cluster` of its
/// members. `errors[i]` is sample `i`'s error under its assigned prototype.
/// Clusters smaller than `per_cluster` use all members.
#[allow(clippy::too_many_arguments)]
pub fn label_clusters_limited(
    assign: &[usize],
    errors: &[f64],
    labels: &[usize],
    clusters: usize,
    classes: usize,
    per_cluster: usize,
    selection: Selection,
    seed: u64,
) -> Result<Vec<usize>> {
    check_lengths(assign, labels)?;
    if errors.len() != assign.len() {
        return Err(Error::Shape("one error per sample required".into()));
    }
    let mut members = vec![Vec::new(); clusters];
    for (i, &a) in assign.iter().enumerate() {
        if a >= clusters {
            return Err(Error::InvalidArgument(alloc::format!("cluster index {a} >= {clusters}")));
        }
        members[a].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked_assign = Vec::new();
    let mut picked_labels = Vec::new();
    for (k, m) in members.iter_mut().enumerate() {
        match selection {
            Selection::Closest => m.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b))),
            Selection::Random => m.shuffle(&mut rng),
        }
        for &i in m.iter().take(per_cluster) {
            picked_assign.push(k);
            picked_labels.push(labels[i]);
        }
    }
    label_clusters_majority(&picked_assign, &picked_labels, clusters, classes)
}

/// Applies a cluster-to-class map.
pub fn map_clusters(assign: &[usize], map: &[usize]) -> Vec<usize> {
    assign.iter().map(|&a| map[a]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(overall_accuracy(&[0, 1, 2, 2], &[0, 1, 2, 1]).unwrap(), 0.75);
        assert_eq!(mean_accuracy(&[0, 0], &[0, 1], 2).unwrap(), 0.5);
        assert!(overall_accuracy(&[], &[]).is_err());
        assert!(overall_accuracy(&[0], &[0, 1]).is_err());
        // absent class 2 is dropped
        assert_eq!(mean_accuracy(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert_eq!(absent_classes(&[0, 1], 3), vec![2]);
    }

    #[test]
    fn imbalanced_oa_differs_from_ma() {
        let truth = [0, 0, 0, 0, 1];
        let pred = [0, 0, 0, 0, 0];
        assert_eq!(overall_accuracy(&pred, &truth).unwrap(), 0.8);
        assert_eq!(mean_accuracy(&pred, &truth, 2).unwrap(), 0.5);
    }

    #[test]
    fn majority_labeling() {
        let assign = [0, 0, 0, 0, 1, 1, 1];
        let labels = [2, 2, 2, 1, 0, 1, 1];
        assert_eq!(label_clusters_majority(&assign, &labels, 3, 3).unwrap(), vec![2, 1, 1]);
        // tie goes to the lowest class
        assert_eq!(label_clusters_majority(&[0, 0], &[1, 0], 1, 2).unwrap(), vec![0]);
    }

    #[test]
    fn limited_labeling() {
        let assign = [0, 0, 0, 1, 1];
        let errors = [0.1, 0.5, 0.2, 0.3, 0.05];
        let labels = [1, 0, 0, 1, 0];
        let map = label_clusters_limited(&assign, &errors, &labels, 2, 2, 1, Selection::Closest, 0).unwrap();
        assert_eq!(map, vec![1, 0]);
        let full = label_clusters_majority(&assign, &labels, 2, 2).unwrap();
        let big = label_clusters_limited(&assign, &errors, &labels, 2, 2, 10, Selection::Random, 3).unwrap();
        assert_eq!(big, full);
    }
}
