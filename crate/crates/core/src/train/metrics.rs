//! Accuracy and macro one-vs-rest AUC.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc_macro_ovr: f64,
    pub loss: f64,
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).iter().map(|v| v.f64()).collect()).collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    accuracy_rows(&rows(logits), labels)
}

pub fn accuracy_rows(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(invalid!("accuracy needs N >= 1 rows and one label per row"));
    }
    let hits = scores.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without both a positive and a negative sample.
    pub skipped: Vec<usize>,
}

/// Mann–Whitney AUC of `scores` for positives vs negatives, ties count 1/2.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank sum keeps everything in exact integers
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank2_pos += mid2 * order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos * (n_pos + 1)) as u128;
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn auc_macro_ovr<T: Scalar>(scores: &Matrix<T>, labels: &[usize]) -> Result<AucReport> {
    auc_macro_ovr_rows(&rows(scores), labels)
}

pub fn auc_macro_ovr_rows(scores: &[Vec<f64>], labels: &[usize]) -> Result<AucReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(invalid!("auc needs N >= 1 rows and one label per row"));
    }
    let k = scores[0].len();
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let a = binary_auc(&col, &pos);
        if a.is_none() {
            skipped.push(c);
        }
        per_class.push(a);
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::UndefinedMetric("every class lacks a positive or a negative sample".into()));
    }
    let value = included.iter().sum::<f64>() / included.len() as f64;
    Ok(AucReport { value, per_class, skipped })
}

/// All positive–negative pairs, the reference the rank formula must reproduce.
pub fn brute_force_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (&si, _) in scores.iter().zip(positive).filter(|(_, &p)| p) {
        for (&sj, _) in scores.iter().zip(positive).filter(|(_, &p)| !p) {
            pairs += 1;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}
