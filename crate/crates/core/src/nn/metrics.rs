use serde::{Deserialize, Serialize};

use crate::spectrum::SpectrumReport;

/// `counts[true][pred]`
pub fn confusion_matrix(labels: &[usize], preds: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        counts[y][p] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Classes that appear in neither labels nor predictions; they count as
    /// F1 = 0 in the macro average.
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn compute(labels: &[usize], preds: &[usize], classes: usize) -> Self {
        let cm = confusion_matrix(labels, preds, classes);
        let n = labels.len().max(1) as f64;
        let correct: u64 = (0..classes).map(|c| cm[c][c]).sum();
        let mut per_class_f1 = Vec::with_capacity(classes);
        let mut absent_classes = Vec::new();
        for c in 0..classes {
            let tp = cm[c][c] as f64;
            let support: u64 = cm[c].iter().sum();
            let predicted: u64 = cm.iter().map(|row| row[c]).sum();
            if support == 0 && predicted == 0 {
                absent_classes.push(c);
                per_class_f1.push(0.0);
                continue;
            }
            // F1 = 2TP / (2TP + FP + FN) = 2TP / (support + predicted)
            per_class_f1.push(2.0 * tp / (support + predicted) as f64);
        }
        let macro_f1 = if classes == 0 {
            0.0
        } else {
            per_class_f1.iter().sum::<f64>() / classes as f64
        };
        Self {
            accuracy: correct as f64 / n,
            macro_f1,
            per_class_f1,
            absent_classes,
        }
    }
}

/// Classification metrics plus the spectrum of the model's feature space on
/// the evaluated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// `None` when the features are identically zero.
    pub spectrum: Option<SpectrumReport>,
    pub predictions: Vec<usize>,
}
