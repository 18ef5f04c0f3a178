use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the positive class for binary precision, recall and F1.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub target_subject_id: String,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub kappa: f64,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; class_count]; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= class_count || y >= class_count {
            return Err(Error::Data(format!("class index out of range for {class_count} classes")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_prf(m: &[Vec<usize>], k: usize) -> (f64, f64, f64) {
    let tp = m[k][k];
    let actual: usize = m[k].iter().sum();
    let predicted: usize = m.iter().map(|row| row[k]).sum();
    let recall = ratio(tp, actual);
    let precision = ratio(tp, predicted);
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (recall, precision, f1)
}

/// Metrics from a confusion matrix; binary scores use class 1 as positive,
/// larger problems report macro averages.
pub fn metrics_from_confusion(subject: &str, m: Vec<Vec<usize>>) -> FoldResult {
    let k = m.len();
    let total: usize = m.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| m[i][i]).sum();
    let accuracy = ratio(trace, total);

    let (recall, precision, f1) = if k == 2 {
        class_prf(&m, POSITIVE_CLASS)
    } else {
        let per: Vec<(f64, f64, f64)> = (0..k).map(|c| class_prf(&m, c)).collect();
        let n = k as f64;
        (
            per.iter().map(|v| v.0).sum::<f64>() / n,
            per.iter().map(|v| v.1).sum::<f64>() / n,
            per.iter().map(|v| v.2).sum::<f64>() / n,
        )
    };

    let kappa = if total == 0 {
        0.0
    } else {
        let t = total as f64;
        let pe: f64 = (0..k)
            .map(|c| {
                let row: usize = m[c].iter().sum();
                let col: usize = m.iter().map(|r| r[c]).sum();
                row as f64 * col as f64 / (t * t)
            })
            .sum();
        if 1.0 - pe == 0.0 {
            0.0
        } else {
            (accuracy - pe) / (1.0 - pe)
        }
    };

    FoldResult {
        target_subject_id: subject.to_string(),
        confusion: m,
        accuracy,
        recall,
        precision,
        f1,
        kappa,
    }
}

pub fn compute_metrics(subject: &str, predictions: &[usize], labels: &[usize], class_count: usize) -> Result<FoldResult> {
    Ok(metrics_from_confusion(subject, confusion_matrix(predictions, labels, class_count)?))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
