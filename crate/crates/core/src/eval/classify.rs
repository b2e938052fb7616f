use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1_micro: f64,
    pub n: usize,
    /// Predictions matching no label.
    pub invalid: usize,
}

pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Micro-averaged precision, recall and F1.
///
/// Each sample contributes exactly one predicted label; a prediction outside
/// the label set is a prediction of a reserved invalid label, so it is a false
/// positive for that label and a false negative for the true one.
pub fn classification_metrics<S: AsRef<str>>(
    predictions: &[S],
    references: &[S],
    label_set: &[S],
) -> Result<ClassificationMetrics> {
    if predictions.is_empty() || references.is_empty() {
        return Err(Error::EmptyInput("classification samples"));
    }
    if predictions.len() != references.len() {
        return Err(Error::Shape(alloc::format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let labels: Vec<String> = label_set
        .iter()
        .map(|l| normalize_label(l.as_ref()))
        .collect();
    let (mut tp, mut fp, mut fn_, mut invalid) = (0usize, 0usize, 0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let r = normalize_label(r.as_ref());
        if !labels.contains(&r) {
            return Err(Error::UnknownName(r));
        }
        let p = normalize_label(p.as_ref());
        if !labels.contains(&p) {
            invalid += 1;
        }
        if p == r {
            tp += 1;
        } else {
            fp += 1;
            fn_ += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1_micro = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        precision,
        recall,
        f1_micro,
        n: predictions.len(),
        invalid,
    })
}
