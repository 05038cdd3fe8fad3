//! Precision, recall, balanced accuracy, ROC analysis and the experiment
//! drivers built on them.

pub mod experiment;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no evaluated samples")]
    EmptyCounts,
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// Counts with `score >= threshold` predicted positive.
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        Self::from_predictions(&pred, labels)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
}

fn ratio_or(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Precision and recall are 0 on an empty denominator. In balanced
/// accuracy a class absent from the labels contributes 0.5.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    if c.total() == 0 {
        return Err(EvalError::EmptyCounts);
    }
    let tpr = ratio_or(c.tp, c.tp + c.fn_, 0.5);
    let tnr = ratio_or(c.tn, c.tn + c.fp, 0.5);
    Ok(Metrics {
        precision: ratio_or(c.tp, c.tp + c.fp, 0.0),
        recall: ratio_or(c.tp, c.tp + c.fn_, 0.0),
        balanced_accuracy: (tpr + tnr) / 2.0,
    })
}

pub fn balanced_accuracy_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    metrics(&ConfusionCounts::at_threshold(scores, labels, threshold)).map_or(0.5, |m| m.balanced_accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Points ordered by descending threshold, starting at `(0, 0)` with an
/// infinite threshold and ending at `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn auc_trapezoid(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocChoice {
    pub curve: RocCurve,
    pub threshold: f64,
    pub distance: f64,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    Ok(())
}

/// ROC over every distinct score, and the threshold closest to `(0, 1)`.
/// Ties go to higher TPR, then to the lower threshold.
pub fn roc_and_threshold(scores: &[f64], labels: &[bool]) -> Result<RocChoice, EvalError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64, threshold: t });
    }
    let dist = |p: &RocPoint| (p.fpr * p.fpr + (1.0 - p.tpr).powi(2)).sqrt();
    let best = points[1..]
        .iter()
        .min_by(|a, b| {
            dist(a)
                .total_cmp(&dist(b))
                .then(b.tpr.total_cmp(&a.tpr))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .copied()
        .expect("at least one finite threshold");
    Ok(RocChoice { threshold: best.threshold, distance: dist(&best), curve: RocCurve { points } })
}

/// Probability that a random positive outscores a random negative, ties
/// counting half.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[idx[k]]).count() as f64 * avg;
        i = j + 1;
    }
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
