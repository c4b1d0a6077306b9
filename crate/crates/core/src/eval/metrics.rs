use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Eval("no samples to score".into()));
    }
    let mut cm = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= n_classes || p >= n_classes {
            return Err(Error::Index(format!(
                "label {y} / prediction {p} outside [0, {n_classes})"
            )));
        }
        cm[y][p] += 1;
    }
    Ok(cm)
}

/// Per-class precision, recall and F1; an undefined ratio counts as 0.
pub fn class_scores(cm: &[Vec<u64>]) -> Vec<ClassScores> {
    let c = cm.len();
    (0..c)
        .map(|k| {
            let tp = cm[k][k] as f64;
            let support: u64 = cm[k].iter().sum();
            let predicted: u64 = cm.iter().map(|row| row[k]).sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

pub fn weighted_f1_from_scores(scores: &[ClassScores]) -> f64 {
    let n: u64 = scores.iter().map(|s| s.support).sum();
    scores
        .iter()
        .map(|s| s.support as f64 / n as f64 * s.f1)
        .sum()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(predictions, labels, n_classes)?;
    Ok(weighted_f1_from_scores(&class_scores(&cm)))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Evaluation result of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub modality: String,
    pub split: String,
    pub n_samples: usize,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<u64>>,
}

/// Where a record came from; everything except the predictions themselves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordTag {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub modality: String,
    pub split: String,
}

impl MetricsRecord {
    pub fn from_predictions(
        tag: RecordTag,
        predictions: &[usize],
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        let confusion = confusion_matrix(predictions, labels, n_classes)?;
        let per_class = class_scores(&confusion);
        let trace: u64 = (0..n_classes).map(|k| confusion[k][k]).sum();
        Ok(Self {
            run_id: tag.run_id,
            seed: tag.seed,
            variant: tag.variant,
            modality: tag.modality,
            split: tag.split,
            n_samples: labels.len(),
            weighted_f1: weighted_f1_from_scores(&per_class),
            accuracy: trace as f64 / labels.len() as f64,
            per_class,
            confusion,
        })
    }
}
