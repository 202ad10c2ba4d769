//! Confusion matrices and the accuracy figures derived from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix { labels, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::Shape {
                expected: format!("{0}x{0} counts", labels.len()),
                got: format!("{} rows", counts.len()),
            });
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn from_predictions(labels: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                expected: format!("{} predictions", truth.len()),
                got: predicted.len().to_string(),
            });
        }
        let mut cm = Self::zeros(labels);
        let k = cm.labels.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::LabelOutOfRange { label: t.max(p), classes: k });
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// `trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Recall per class; `None` for classes with no true samples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean recall over the classes that have true samples.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = self.per_class_recall().into_iter().flatten().collect();
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }

    /// CSV with a header row of class names; the first column names the true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(label);
            for c in row {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class_recall: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        EvalReport {
            accuracy: confusion.accuracy(),
            balanced_accuracy: confusion.balanced_accuracy(),
            per_class_recall: confusion.per_class_recall(),
            confusion,
        }
    }

    pub fn from_predictions(labels: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(ConfusionMatrix::from_predictions(labels, truth, predicted)?))
    }
}

/// Balanced accuracy of predictions over `classes` classes.
pub fn balanced_accuracy(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<f64> {
    let labels = (0..classes).map(|i| i.to_string()).collect();
    Ok(ConfusionMatrix::from_predictions(labels, truth, predicted)?.balanced_accuracy())
}
