use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub matthews_corr: f64,
    /// Binary F1 of class 1.
    pub f1: f64,
    pub loss: f64,
}

/// Accuracy, Matthews correlation and class-1 F1 of `predictions`.
///
/// MCC uses the K-class confusion-matrix form, which reduces to
/// `(TP·TN − FP·FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))` for two classes;
/// it is 0 when a marginal is degenerate.
pub fn classification_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<(f64, f64, f64)> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![0u64; num_classes * num_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                num_classes,
            });
        }
        confusion[t * num_classes + p] += 1;
    }
    let total = labels.len() as f64;
    let correct: u64 = (0..num_classes).map(|k| confusion[k * num_classes + k]).sum();
    let accuracy = correct as f64 / total;

    let true_counts: Vec<f64> = (0..num_classes)
        .map(|k| (0..num_classes).map(|j| confusion[k * num_classes + j]).sum::<u64>() as f64)
        .collect();
    let pred_counts: Vec<f64> = (0..num_classes)
        .map(|k| (0..num_classes).map(|j| confusion[j * num_classes + k]).sum::<u64>() as f64)
        .collect();
    let cov_tp = correct as f64 * total - true_counts.iter().zip(&pred_counts).map(|(t, p)| t * p).sum::<f64>();
    let cov_pp = total * total - pred_counts.iter().map(|p| p * p).sum::<f64>();
    let cov_tt = total * total - true_counts.iter().map(|t| t * t).sum::<f64>();
    let mcc = if cov_pp == 0.0 || cov_tt == 0.0 {
        0.0
    } else {
        cov_tp / (cov_pp * cov_tt).sqrt()
    };

    let f1 = if num_classes > 1 {
        let tp = confusion[num_classes + 1] as f64;
        let fp = pred_counts[1] - tp;
        let fn_ = true_counts[1] - tp;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    } else {
        0.0
    };
    Ok((accuracy, mcc, f1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_confusion(tp: usize, tn: usize, fp: usize, fn_: usize) -> (Vec<usize>, Vec<usize>) {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (n, p, t) in [(tp, 1, 1), (tn, 0, 0), (fp, 1, 0), (fn_, 0, 1)] {
            preds.extend(std::iter::repeat(p).take(n));
            labels.extend(std::iter::repeat(t).take(n));
        }
        (preds, labels)
    }

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 1, 0, 1];
        let (acc, mcc, f1) = classification_scores(&labels, &labels, 2).unwrap();
        assert_eq!((acc, mcc, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictions_have_zero_mcc() {
        let labels = vec![0, 1, 0, 1];
        let (acc, mcc, _) = classification_scores(&[1; 4], &labels, 2).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(mcc, 0.0);
    }

    #[test]
    fn hand_evaluated_confusion() {
        let (p, l) = from_confusion(6, 4, 1, 1);
        let (acc, mcc, f1) = classification_scores(&p, &l, 2).unwrap();
        assert!((acc - 10.0 / 12.0).abs() < 1e-15);
        // (6·4 − 1·1) / sqrt(7·7·5·5)
        assert!((mcc - 23.0 / 35.0).abs() < 1e-12);
        // precision = recall = 6/7
        assert!((f1 - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_matches_binary_closed_form() {
        for (tp, tn, fp, fn_) in [(3, 9, 2, 5), (10, 1, 7, 2), (0, 5, 5, 0)] {
            let (p, l) = from_confusion(tp, tn, fp, fn_);
            let (_, mcc, _) = classification_scores(&p, &l, 2).unwrap();
            let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
            let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
            let oracle = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
            assert!((mcc - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label() {
        assert!(classification_scores(&[0, 1], &[0, 2], 2).is_err());
    }
}
