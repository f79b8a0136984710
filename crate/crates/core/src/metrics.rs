use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Error,
    /// Classification error averaged over classes with equal weight.
    UnweightedError,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Error => "error",
            Metric::UnweightedError => "unweighted_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Metric::Accuracy, Metric::Error, Metric::UnweightedError]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn evaluate(self, predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
        match self {
            Metric::Accuracy => accuracy(predictions, labels),
            Metric::Error => 1.0 - accuracy(predictions, labels),
            Metric::UnweightedError => unweighted_error(predictions, labels, classes),
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label count");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean over the classes present in `labels` of the per-class error rate.
pub fn unweighted_error(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label count");
    let mut seen = vec![0usize; classes];
    let mut wrong = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        if p != l {
            wrong[l] += 1;
        }
    }
    let present: Vec<f64> = seen
        .iter()
        .zip(&wrong)
        .filter(|(s, _)| **s > 0)
        .map(|(&s, &w)| w as f64 / s as f64)
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}
