//! Exact, dependency-light classification metrics: rank-based AUC, step-wise
//! average precision, and macro-averaged F1.
//!
//! Tie conventions are pinned here because library defaults differ: AUC gives
//! half credit to cross-class ties (Mann-Whitney), and AP groups tied scores
//! at a single threshold.

use crate::error::{Error, Result};

/// Scores paired with binary ground-truth labels.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "scores ({}) and labels ({}) length mismatch",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite score at index {i}"
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!(
                "label at index {i} is not in {{0,1}}"
            )));
        }
        Ok(Self { scores, labels })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic:
/// P(score_pos > score_neg) + 0.5 * P(tie) over all cross-class pairs.
///
/// Computed from tie-averaged ranks in O(n log n).
pub fn auc(sl: &ScoredLabels) -> Result<f64> {
    let n = sl.scores.len();
    let n_pos = sl.positives();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(
            "AUC undefined: both classes must be present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sl.scores[a].partial_cmp(&sl.scores[b]).unwrap());

    // Average ranks within tied score groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sl.scores[order[j + 1]] == sl.scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + (j + 1)) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if sl.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos_f = n_pos as f64;
    let n_neg_f = n_neg as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg_f))
}

/// Average precision: sum over descending-score thresholds of
/// (R_k - R_{k-1}) * P_k, with tied scores grouped at one threshold.
pub fn average_precision(sl: &ScoredLabels) -> Result<f64> {
    let n_pos = sl.positives();
    if n_pos == 0 {
        return Err(Error::Eval("AP undefined: no positive labels".into()));
    }

    let mut order: Vec<usize> = (0..sl.scores.len()).collect();
    order.sort_by(|&a, &b| sl.scores[b].partial_cmp(&sl.scores[a]).unwrap());

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && sl.scores[order[j + 1]] == sl.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if sl.labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Macro-averaged F1 over the two classes, with F1 = 0 when a class has
/// precision + recall = 0.
pub fn f1_macro(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "predictions ({}) and labels ({}) length mismatch",
            predictions.len(),
            labels.len()
        )));
    }
    let mut f1_sum = 0.0;
    for class in 0..2u8 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &l) in predictions.iter().zip(labels) {
            if p == class && l == class {
                tp += 1.0;
            } else if p == class {
                fp += 1.0;
            } else if l == class {
                fn_ += 1.0;
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    Ok(f1_sum / 2.0)
}
