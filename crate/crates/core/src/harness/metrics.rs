use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy summary of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `None` for classes without evaluation samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    /// Unweighted mean over classes that have samples.
    pub mean_accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub epoch: usize,
    pub split: String,
}

impl MetricsReport {
    pub fn from_confusion(
        confusion: Vec<Vec<u64>>,
        class_names: Vec<String>,
        epoch: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let l = class_names.len();
        if confusion.len() != l || confusion.iter().any(|r| r.len() != l) {
            return Err(Error::ShapeMismatch {
                context: "confusion matrix",
                expected: vec![l, l],
                actual: vec![confusion.len(), confusion.first().map_or(0, Vec::len)],
            });
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::data("no evaluation samples"));
        }
        let correct: u64 = (0..l).map(|k| confusion[k][k]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let split = split.into();
        for (k, acc) in per_class.iter().enumerate() {
            if acc.is_none() {
                log::warn!("class `{}` has no {split} samples; excluded from the mean", class_names[k]);
            }
        }
        Ok(Self {
            per_class_accuracy: per_class,
            overall_accuracy: correct as f64 / total as f64,
            mean_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            confusion,
            class_names,
            epoch,
            split,
        })
    }

    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        class_names: Vec<String>,
        epoch: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let l = class_names.len();
        if labels.len() != predictions.len() {
            return Err(Error::ShapeMismatch {
                context: "labels vs predictions",
                expected: vec![labels.len()],
                actual: vec![predictions.len()],
            });
        }
        let mut confusion = vec![vec![0u64; l]; l];
        for (row, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
            if y >= l || p >= l {
                return Err(Error::LabelOutOfRange {
                    label: y.max(p),
                    classes: l,
                    row: Some(row),
                });
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion, class_names, epoch, split)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Classes excluded from the mean for lack of samples.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&k| self.per_class_accuracy[k].is_none())
            .collect()
    }

    pub fn to_record(&self) -> EpochRecord {
        EpochRecord {
            epoch: self.epoch,
            split: self.split.clone(),
            per_class: self
                .class_names
                .iter()
                .cloned()
                .zip(self.per_class_accuracy.iter().copied())
                .collect(),
            overall: self.overall_accuracy,
            mean: self.mean_accuracy,
            confusion: self.confusion.clone(),
            empty_classes: self
                .empty_classes()
                .into_iter()
                .map(|k| self.class_names[k].clone())
                .collect(),
        }
    }

    /// Rebuilds a report from its serialized form, recomputing every
    /// derived value from the confusion matrix.
    pub fn from_record(record: &EpochRecord) -> Result<Self> {
        let names = record.per_class.keys().cloned().collect();
        Self::from_confusion(record.confusion.clone(), names, record.epoch, record.split.clone())
    }
}

/// Serialized form of a [`MetricsReport`]; `per_class` keeps class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub per_class: IndexMap<String, Option<f64>>,
    pub overall: f64,
    pub mean: f64,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_classes: Vec<String>,
}
