//! Classification metrics: confusion matrices, one-vs-rest
//! precision/recall/F1/specificity with macro averages, pairwise
//! macro-averaged AUC and Wilson score intervals.
//!
//! Zero-denominator metrics are reported as undefined (`None`) and
//! excluded from macro averages with a warning, rather than silently
//! coerced to 0 — small evaluation sets stay honest.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Config("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { k, counts: rows.iter().flat_map(|r| r.iter().copied()).collect() })
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.k + predicted] += 1;
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|c| self.at(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.at(r, c)).sum()
    }
}

/// One-vs-rest counts for a single class (used directly in multi-label
/// mode, derived from the confusion matrix otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub macro_specificity: Option<f64>,
    /// Pairwise macro-averaged AUC, when scores were available.
    pub auc: Option<f64>,
    /// Wilson 95% intervals on per-class accuracy (multi-label reports).
    pub wilson_accuracy: Option<Vec<(f64, f64)>>,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn class_metrics(c: &BinaryCounts) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let specificity = ratio(c.tn, c.tn + c.fp);
    ClassMetrics { precision, recall, f1, specificity }
}

fn macro_of(values: &[Option<f64>], name: &str, warnings: &mut Vec<String>) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.len() < values.len() {
        warnings.push(format!(
            "{}: {} of {} classes undefined (0/0), excluded from the macro average",
            name,
            values.len() - defined.len(),
            values.len()
        ));
    }
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// One-vs-rest counts per class from a confusion matrix.
pub fn binary_counts(cm: &ConfusionMatrix) -> Vec<BinaryCounts> {
    let total = cm.total();
    (0..cm.k)
        .map(|c| {
            let tp = cm.at(c, c);
            let fn_ = cm.row_sum(c) - tp;
            let fp = cm.col_sum(c) - tp;
            let tn = total - tp - fn_ - fp;
            BinaryCounts { tp, fp, tn, fn_ }
        })
        .collect()
}

/// Per-class and macro precision/recall/F1/specificity from a confusion
/// matrix.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    metrics_from_counts(&binary_counts(cm))
}

pub fn metrics_from_counts(counts: &[BinaryCounts]) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = counts.iter().map(class_metrics).collect();
    let mut warnings = Vec::new();
    let macro_precision = macro_of(
        &per_class.iter().map(|m| m.precision).collect::<Vec<_>>(),
        "precision",
        &mut warnings,
    );
    let macro_recall =
        macro_of(&per_class.iter().map(|m| m.recall).collect::<Vec<_>>(), "recall", &mut warnings);
    let macro_f1 = macro_of(&per_class.iter().map(|m| m.f1).collect::<Vec<_>>(), "f1", &mut warnings);
    let macro_specificity = macro_of(
        &per_class.iter().map(|m| m.specificity).collect::<Vec<_>>(),
        "specificity",
        &mut warnings,
    );
    MetricsReport {
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        macro_specificity,
        auc: None,
        wilson_accuracy: None,
        warnings,
    }
}

/// Rank-based AUC of `score` separating positives from negatives, with
/// half credit for ties.
fn binary_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Macro-averaged pairwise AUC for single-label problems: for every
/// ordered class pair `(i, j)`, the AUC of class-i scores separating
/// class-i samples from class-j samples, averaged over all pairs.
pub fn pairwise_macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Config("need one score row per label".into()));
    }
    let k = scores[0].len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Config(format!("label {} out of range", l)));
        }
        by_class[l].push(i);
    }
    let populated = by_class.iter().filter(|v| !v.is_empty()).count();
    if populated < 2 {
        return Err(Error::Config("pairwise AUC needs samples from at least two classes".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in 0..k {
            if i == j || by_class[i].is_empty() || by_class[j].is_empty() {
                continue;
            }
            let pos: Vec<f64> = by_class[i].iter().map(|&s| scores[s][i]).collect();
            let neg: Vec<f64> = by_class[j].iter().map(|&s| scores[s][i]).collect();
            total += binary_auc(&pos, &neg);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Config("wilson interval needs n > 0".into()));
    }
    if successes > n {
        return Err(Error::Config("successes exceed trials".into()));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}
