//! Regression and binary-classification metrics.
//!
//! Degenerate inputs never produce NaN: constant ground truth gives a bounded
//! R² sentinel, a single-class fold drops ROC-AUC, and zero denominators in
//! precision/recall/F1 give 0. Each of these raises a [`MetricWarning`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const R2: &str = "r2";
pub const MSE: &str = "mse";
pub const MAE: &str = "mae";
pub const F1: &str = "f1";
pub const PRECISION: &str = "precision";
pub const RECALL: &str = "recall";
pub const ACCURACY: &str = "accuracy";
pub const ROC_AUC: &str = "roc_auc";

/// R² reported when the test labels are constant and the predictions are not.
pub const CONSTANT_TRUTH_R2: f64 = -1e9;

/// Probability at or above which a sample is assigned class 1.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {left} truths vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric over an empty sample")]
    Empty,
    #[error("ROC-AUC needs both classes present")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricWarning {
    /// Test labels had zero variance; R² replaced by a sentinel.
    ConstantTruth,
    /// Only one class in the test labels; ROC-AUC omitted.
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub warning: Option<MetricWarning>,
}

type Result<T> = std::result::Result<T, MetricError>;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `1 - SS_res / SS_tot`, with `SS_tot` taken about the mean of `y_true`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<MetricValue> {
    check_lengths(y_true, y_pred)?;
    let m = mean(y_true);
    let ss_tot: f64 = y_true.iter().map(|y| (y - m) * (y - m)).sum();
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    if ss_tot == 0.0 {
        let value = if ss_res == 0.0 {
            1.0
        } else {
            CONSTANT_TRUTH_R2
        };
        return Ok(MetricValue {
            value,
            warning: Some(MetricWarning::ConstantTruth),
        });
    }
    Ok(MetricValue {
        value: 1.0 - ss_res / ss_tot,
        warning: None,
    })
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let s: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(s / y_true.len() as f64)
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let s: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).abs()).sum();
    Ok(s / y_true.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Harmonic mean of precision and recall; 0 when either is undefined.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp == 0 || self.tp + self.fn_ == 0 {
            return 0.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(cm: &ConfusionMatrix) -> f64 {
    cm.f1()
}

/// Counts outcomes with class 1 predicted iff `prob >= threshold`. A truth
/// value counts as positive iff it equals 1.
pub fn confusion(y_true: &[f64], prob: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if y_true.len() != prob.len() {
        return Err(MetricError::LengthMismatch {
            left: y_true.len(),
            right: prob.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in y_true.iter().zip(prob) {
        match (y == 1.0, p >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Mann-Whitney form of the ROC area: the fraction of (positive, negative)
/// pairs where the positive scores higher, ties counting one half.
pub fn roc_auc(y_true: &[f64], score: &[f64]) -> Result<f64> {
    check_lengths(y_true, score)?;
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));

    let n_pos = y_true.iter().filter(|&&y| y == 1.0).count() as u64;
    let n_neg = y_true.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }

    // Twice the number of correctly ordered pairs, so ties stay integral.
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && score[order[j]] == score[order[i]] {
            if y_true[order[j]] == 1.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Score of one probe on one train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub task: String,
    pub fold_index: usize,
    /// R² for regression, F1 for classification.
    pub primary: f64,
    pub secondary: BTreeMap<String, f64>,
    pub loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<MetricWarning>,
}

/// Primary metric, secondary metrics and warnings for one set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub primary: f64,
    pub secondary: BTreeMap<String, f64>,
    pub confusion: Option<ConfusionMatrix>,
    pub warnings: Vec<MetricWarning>,
}

pub fn regression_report(y_true: &[f64], y_pred: &[f64]) -> Result<MetricReport> {
    let r2 = r_squared(y_true, y_pred)?;
    let mut secondary = BTreeMap::new();
    secondary.insert(MSE.to_string(), mse(y_true, y_pred)?);
    secondary.insert(MAE.to_string(), mae(y_true, y_pred)?);
    Ok(MetricReport {
        primary: r2.value,
        secondary,
        confusion: None,
        warnings: r2.warning.into_iter().collect(),
    })
}

pub fn classification_report(y_true: &[f64], prob: &[f64]) -> Result<MetricReport> {
    let cm = confusion(y_true, prob, DECISION_THRESHOLD)?;
    if cm.total() == 0 {
        return Err(MetricError::Empty);
    }
    let mut secondary = BTreeMap::new();
    secondary.insert(PRECISION.to_string(), cm.precision());
    secondary.insert(RECALL.to_string(), cm.recall());
    secondary.insert(ACCURACY.to_string(), cm.accuracy());
    let mut warnings = Vec::new();
    match roc_auc(y_true, prob) {
        Ok(auc) => {
            secondary.insert(ROC_AUC.to_string(), auc);
        }
        Err(MetricError::SingleClass) => warnings.push(MetricWarning::SingleClass),
        Err(e) => return Err(e),
    }
    Ok(MetricReport {
        primary: cm.f1(),
        secondary,
        confusion: Some(cm),
        warnings,
    })
}
