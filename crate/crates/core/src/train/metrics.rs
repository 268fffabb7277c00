use crate::data::{batched, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 of `predictions` against `labels`.
///
/// Per-class F1 is `2·tp / (2·tp + fp + fn)`. A class that is neither
/// predicted nor present has no defined F1 and is left out of the mean.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Metrics {
    assert_eq!(predictions.len(), labels.len(), "prediction/label count mismatch");
    if labels.is_empty() {
        return Metrics {
            accuracy: 0.0,
            macro_f1: 0.0,
        };
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let f1s: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len().max(1) as f64,
    }
}

/// Evaluation-mode predictions over `ds` in dataset order.
pub fn predict_dataset(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    for batch in batched(ds, batch_size, 0, false) {
        preds.extend(model.predict(&batch?)?);
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict_dataset(model, ds, batch_size)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label()).collect();
    Ok(classification_metrics(&preds, &labels, model.config().num_classes.max(ds.num_classes)))
}
