//! Accuracy, per-class average precision, mAP and binary F1.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::fusion::{FusionModel, MultimodalBatch};
use crate::nn::{argmax, softmax_rows};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Mean of the defined per-class APs.
    pub map: f64,
    /// `None` for classes with no positive sample.
    pub per_class_ap: Vec<Option<f64>>,
    /// Positive class is 1; only for two-class problems.
    pub f1: Option<f64>,
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// `AP = Σₙ (Rₙ − Rₙ₋₁)·Pₙ` over thresholds at the distinct scores in
/// descending order; tied scores form one threshold. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && same_threshold(scores[order[i]], s) {
            seen += 1;
            if positive[order[i]] {
                tp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// NaN scores (from a diverged model) form a single threshold of their own.
fn same_threshold(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// `2PR / (P + R)` for `positive_class`; 0 when undefined.
pub fn f1_score(preds: &[usize], labels: &[usize], positive_class: usize) -> f64 {
    let tp = preds
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| p == positive_class && y == positive_class)
        .count() as f64;
    let pred_pos = preds.iter().filter(|&&p| p == positive_class).count() as f64;
    let actual_pos = labels.iter().filter(|&&y| y == positive_class).count() as f64;
    if pred_pos == 0.0 || actual_pos == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / pred_pos, tp / actual_pos);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics from per-class scores (logits or probabilities; AP only depends on
/// the ranking within each class column).
pub fn report_from_scores(scores: &Matrix, labels: &[usize]) -> Result<MetricsReport> {
    if scores.rows() != labels.len() {
        return Err(Error::config(format!(
            "{} score rows for {} labels",
            scores.rows(),
            labels.len()
        )));
    }
    let classes = scores.cols();
    let preds: Vec<usize> = (0..scores.rows()).map(|i| argmax(scores.row(i))).collect();
    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let col: Vec<f64> = (0..scores.rows()).map(|i| scores[(i, c)]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let ap = average_precision(&col, &pos);
            if ap.is_none() {
                warn!("class {c} has no positive sample; excluded from mAP");
            }
            ap
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(MetricsReport {
        accuracy: accuracy(scores, labels),
        map,
        per_class_ap,
        f1: (classes == 2).then(|| f1_score(&preds, labels, 1)),
    })
}

/// Evaluates `model` on `test`, scoring with softmax probabilities.
pub fn evaluate(model: &FusionModel, test: &MultimodalBatch) -> Result<MetricsReport> {
    let (_, logits) = model.predict(test)?;
    report_from_scores(&softmax_rows(&logits), &test.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_sample_fixture() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nan_scores_terminate() {
        let ap = average_precision(&[f64::NAN, f64::NAN, 0.5], &[true, false, false]).unwrap();
        assert!(ap.is_finite());
    }

    #[test]
    fn signed_zeros_tie() {
        let ap = average_precision(&[0.0, -0.0], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ties_form_one_threshold() {
        // all tied: a single threshold with P = 2/4, R = 1
        let ap = average_precision(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn absent_class_is_undefined() {
        assert_eq!(average_precision(&[0.3, 0.1], &[false, false]), None);
        let scores = Matrix::from_rows(&[[0.9, 0.1, 0.0], [0.2, 0.8, 0.0]]).unwrap();
        let r = report_from_scores(&scores, &[0, 1]).unwrap();
        assert_eq!(r.per_class_ap[2], None);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.f1, None);
    }

    #[test]
    fn majority_prediction_on_balanced_binary() {
        // every sample predicted class 1
        let scores = Matrix::from_rows(&[[0.0, 1.0]; 4]).unwrap();
        let labels = [0, 1, 0, 1];
        let r = report_from_scores(&scores, &labels).unwrap();
        assert_eq!(r.accuracy, 0.5);
        // P = 1/2, R = 1 ⇒ F1 = 2/3
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_without_predicted_positives_is_zero() {
        assert_eq!(f1_score(&[0, 0], &[1, 0], 1), 0.0);
    }
}
