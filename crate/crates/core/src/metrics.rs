//! Confusion matrix and accuracy / macro precision / recall / F1.
//!
//! Zero-division rule: a class that is never predicted has precision 0; a
//! class with no true instances is left out of the macro recall and F1
//! means. Macro precision averages every class that is either present or
//! predicted.

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn add(&mut self, label: usize, pred: usize) -> Result<()> {
        for v in [label, pred] {
            if v >= NUM_CLASSES {
                return Err(Error::contract(format!(
                    "class {v} outside 0..{NUM_CLASSES}"
                )));
            }
        }
        self.counts[label][pred] += 1;
        Ok(())
    }

    /// Row sum: true instances of `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Column sum: predictions of `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("confusion matrix of zero predictions"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(l, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Precision")]
    pub macro_precision: f64,
    #[serde(rename = "Recall")]
    pub macro_recall: f64,
    #[serde(rename = "F1 Score")]
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion_matrix: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("metrics of an empty confusion matrix"));
    }
    let per_class: Vec<ClassMetrics> = (0..NUM_CLASSES)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.predicted(c));
            let recall = ratio(tp, cm.support(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1,
                support: cm.support(c),
            }
        })
        .collect();

    let macro_precision = mean(
        per_class
            .iter()
            .filter(|m| m.support > 0 || cm.predicted(m.class) > 0)
            .map(|m| m.precision),
    );
    let present = || per_class.iter().filter(|m| m.support > 0);
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision,
        macro_recall: mean(present().map(|m| m.recall)),
        macro_f1: mean(present().map(|m| m.f1)),
        per_class,
        confusion_matrix: cm.clone(),
    })
}

impl MetricsReport {
    /// Pretty JSON document with the four headline metrics, the per-class
    /// table and the confusion matrix.
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
