//! Weighted F1, model evaluation, representation diagnostics, seed repeats
//! and ablation tables.

mod experiments;
mod metrics;

pub use experiments::{
    ablation_variants, run_ablation, run_repeats, run_student_baseline, write_ablation_table, write_confusions, write_metrics_csv,
    AblationPlan, AblationRow, AblationTable, Aggregate, RepeatOutcome, Variant,
};
pub use metrics::{
    accuracy, class_scores, confusion_matrix, weighted_f1, weighted_f1_from_scores, ClassScores, MetricsRecord,
    RecordTag,
};

use serde::{Deserialize, Serialize};

use crate::data_io::Batch;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelBundle, MODALITIES};
use crate::synth::PairedDataset;
use crate::tape::Graph;

pub const EVAL_BATCH: usize = 256;

/// Chunks a dataset in its stored order.
pub fn ordered_batches(dataset: &PairedDataset, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
    dataset.samples.chunks(size.max(1)).map(Batch::from_samples)
}

pub fn predict_dataset(model: &dyn Classifier, dataset: &PairedDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    for batch in ordered_batches(dataset, EVAL_BATCH) {
        out.extend(model.predict(&batch?)?);
    }
    Ok(out)
}

/// One deterministic pass without augmentation.
pub fn evaluate(model: &dyn Classifier, dataset: &PairedDataset, tag: RecordTag) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::Eval(format!("split `{}` is empty", tag.split)));
    }
    if model.n_classes() != dataset.n_classes {
        return Err(Error::Eval(format!(
            "model predicts {} classes, split has {}",
            model.n_classes(),
            dataset.n_classes
        )));
    }
    let preds = predict_dataset(model, dataset)?;
    MetricsRecord::from_predictions(tag, &preds, &dataset.labels(), dataset.n_classes)
}

/// How well the trained representations separate, measured on a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    /// Modality accuracy of the adversarial head on `z_inv`.
    pub adv_accuracy: f64,
    /// Modality accuracy of the informative-embedding head on `z_inf`.
    pub m_inf_accuracy: f64,
    /// Modality accuracy of the irrelevant-embedding head on `z_irr`.
    pub m_irr_accuracy: f64,
    pub mean_abs_cos_inv_inf: f64,
    pub mean_abs_cos_inf_irr: f64,
}

pub fn disentanglement(bundle: &ModelBundle, dataset: &PairedDataset) -> Result<Disentanglement> {
    if dataset.is_empty() {
        return Err(Error::Eval("cannot diagnose an empty split".into()));
    }
    let arch = &bundle.arch;
    let mut hits = [0usize; 3];
    let mut cos = [0.0f64; 2];
    let mut count = 0usize;
    for batch in ordered_batches(dataset, EVAL_BATCH) {
        let batch = batch?;
        let mut g = Graph::new(&bundle.params);
        let x = [g.input(batch.x[0].clone()), g.input(batch.x[1].clone())];
        let f = bundle.forward(&mut g, x)?;
        for (m, t) in f.triples.iter().enumerate().take(MODALITIES) {
            for (k, (head, z)) in [(&arch.cl_adv, t.z_inv), (&arch.cl_m_inf, t.z_inf), (&arch.cl_m_irr, t.z_irr)]
                .into_iter()
                .enumerate()
            {
                let logits = head.forward(&mut g, z)?;
                hits[k] += g.value(logits).argmax_rows().iter().filter(|&&p| p == m).count();
            }
            let (inv, inf, irr) = (g.value(t.z_inv), g.value(t.z_inf), g.value(t.z_irr));
            for r in 0..batch.len() {
                cos[0] += abs_cos(inv.row(r), inf.row(r));
                cos[1] += abs_cos(inf.row(r), irr.row(r));
            }
            count += batch.len();
        }
    }
    let n = count as f64;
    Ok(Disentanglement {
        adv_accuracy: hits[0] as f64 / n,
        m_inf_accuracy: hits[1] as f64 / n,
        m_irr_accuracy: hits[2] as f64 / n,
        mean_abs_cos_inv_inf: cos[0] / n,
        mean_abs_cos_inf_irr: cos[1] / n,
    })
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb).max(crate::tape::EPS)).abs()
}
