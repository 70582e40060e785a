//! Evaluation metrics for attribution experiments.

use crate::error::{Error, Result};

/// Percentage of predictions matching labels (both in `{+1, -1}`).
pub fn accuracy(predictions: &[i8], labels: &[i8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "accuracy",
            expected: vec![labels.len().max(1)],
            actual: vec![predictions.len()],
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Rank-based AUC: the probability that a random outlier scores higher than
/// a random inlier, with ties counted one half. Scores are anomaly scores,
/// so higher means more anomalous.
pub fn auc(inlier_scores: &[f64], outlier_scores: &[f64]) -> Result<f64> {
    if inlier_scores.is_empty() || outlier_scores.is_empty() {
        return Err(Error::EmptyInput("auc needs both score sets"));
    }
    let n_in = inlier_scores.len();
    let n_out = outlier_scores.len();
    // tie-aware midranks over the pooled sample
    let mut pooled: Vec<(f64, bool)> = inlier_scores
        .iter()
        .map(|&s| (s, false))
        .chain(outlier_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; everyone in the tie block gets the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for entry in &pooled[i..j] {
            if entry.1 {
                rank_sum_out += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_out - (n_out * (n_out + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}
