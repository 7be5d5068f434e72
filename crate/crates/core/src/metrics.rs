//! Accuracy, cross-entropy, AUROC, AUPR and total-variation distance.

use crate::error::{arg_err, Result};
use crate::numeric::{DenseMatrix, PROB_FLOOR};

/// Scores with binary labels (`true` = positive, e.g. out-of-distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return arg_err(format!("{} scores but {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return arg_err("NaN score");
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Same scores with every label flipped.
    pub fn complement(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            labels: self.labels.iter().map(|l| !l).collect(),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return arg_err(format!("{} predictions but {} labels", probs.rows(), labels.len()));
    }
    if labels.is_empty() {
        return arg_err("accuracy of an empty set");
    }
    let hits = probs
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean `−ln p(y)` with probabilities floored at `1e-6`.
pub fn mean_cross_entropy(probs: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return arg_err("cross-entropy needs one label per non-empty row");
    }
    let mut total = 0.0;
    for (row, &y) in probs.row_iter().zip(labels) {
        match row.get(y) {
            Some(&p) => total -= p.max(PROB_FLOOR).ln(),
            None => return arg_err(format!("label {y} outside [0, {})", row.len())),
        }
    }
    Ok(total / labels.len() as f64)
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by exact pairwise counting.
pub fn auroc(s: &ScoredLabels) -> Result<f64> {
    let pos: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return arg_err("AUROC needs both classes");
    }
    // counts in half-units keep the sum exact
    let mut halves: u64 = 0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                halves += 2;
            } else if a == b {
                halves += 1;
            }
        }
    }
    Ok(halves as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over a descending sweep of
/// distinct thresholds. Rows with equal scores cross the threshold together.
pub fn aupr(s: &ScoredLabels) -> Result<f64> {
    let total_pos = s.positives();
    if total_pos == 0 {
        return arg_err("AUPR needs at least one positive");
    }
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            tp += usize::from(s.labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area)
}

/// `½ Σ |p_k − q_k|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return arg_err("distributions must share a non-empty support");
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|&v| v < 0.0) {
            return arg_err(format!("not a distribution (sum {s})"));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
