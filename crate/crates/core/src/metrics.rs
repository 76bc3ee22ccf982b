//! Class-balanced evaluation metrics over the nine motor-state classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassWeights;
use crate::error::{Error, Result};

pub const MIN_CLASS: i32 = -4;
pub const MAX_CLASS: i32 = 4;

/// Rounds half away from zero and clamps to `[-4, 4]`.
pub fn round_to_class(y_hat: f64) -> i32 {
    y_hat.round().clamp(MIN_CLASS as f64, MAX_CLASS as f64) as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSet {
    Seven,
    Nine,
}

impl ClassSet {
    pub fn from_k(k: usize) -> Result<Self> {
        match k {
            7 => Ok(ClassSet::Seven),
            9 => Ok(ClassSet::Nine),
            _ => Err(Error::Config(format!("class count must be 7 or 9, got {k}"))),
        }
    }

    /// The evaluated `(y, pred)` pairs: the 7-class set drops samples with
    /// `|y| = 4` and clamps predictions to `[-3, 3]`.
    fn filter(self, y: &[i32], pred: &[i32]) -> Result<Vec<(i32, i32)>> {
        if y.len() != pred.len() {
            return Err(Error::dim(
                "samples",
                format!("{} labels vs {} predictions", y.len(), pred.len()),
            ));
        }
        let pairs: Vec<(i32, i32)> = match self {
            ClassSet::Nine => y.iter().copied().zip(pred.iter().copied()).collect(),
            ClassSet::Seven => y
                .iter()
                .zip(pred)
                .filter(|(t, _)| t.abs() != 4)
                .map(|(&t, &p)| (t, p.clamp(-3, 3)))
                .collect(),
        };
        if pairs.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "no samples left for {self:?}-class metrics"
            )));
        }
        Ok(pairs)
    }
}

/// Mean over present true classes of the fraction of that class's samples
/// satisfying `hit`.
fn per_class_rate(pairs: &[(i32, i32)], hit: impl Fn(i32, i32) -> bool) -> f64 {
    let mut counts: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    for &(t, p) in pairs {
        let e = counts.entry(t).or_default();
        e.1 += 1;
        if hit(t, p) {
            e.0 += 1;
        }
    }
    let sum: f64 = counts.values().map(|&(h, n)| h as f64 / n as f64).sum();
    sum / counts.len() as f64
}

pub fn balanced_accuracy(y: &[i32], pred: &[i32], set: ClassSet) -> Result<f64> {
    let pairs = set.filter(y, pred)?;
    Ok(per_class_rate(&pairs, |t, p| t == p))
}

/// Acc±1: per-class rate of predictions within one class of the truth,
/// averaged over present classes.
pub fn relaxed_accuracy(y: &[i32], pred: &[i32]) -> Result<f64> {
    let pairs = ClassSet::Nine.filter(y, pred)?;
    Ok(per_class_rate(&pairs, |t, p| (t - p).abs() <= 1))
}

/// Unweighted mean of per-class F1 over the classes present in `y`.
pub fn macro_f1(y: &[i32], pred: &[i32], set: ClassSet) -> Result<f64> {
    let pairs = set.filter(y, pred)?;
    let mut tp: BTreeMap<i32, usize> = BTreeMap::new();
    let mut fp: BTreeMap<i32, usize> = BTreeMap::new();
    let mut fneg: BTreeMap<i32, usize> = BTreeMap::new();
    for &(t, p) in &pairs {
        tp.entry(t).or_default();
        if t == p {
            *tp.entry(t).or_default() += 1;
        } else {
            *fneg.entry(t).or_default() += 1;
            *fp.entry(p).or_default() += 1;
        }
    }
    let classes: Vec<i32> = tp.keys().copied().collect();
    let total: f64 = classes
        .iter()
        .map(|c| {
            let tp = tp[c] as f64;
            let fp = fp.get(c).copied().unwrap_or(0) as f64;
            let fneg = fneg.get(c).copied().unwrap_or(0) as f64;
            2.0 * tp / (2.0 * tp + fp + fneg)
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Class-weighted `(MAE, MSE)`: `sum w|e| / sum w` and `sum w e^2 / sum w`.
pub fn weighted_mae_mse(y: &[f64], y_hat: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if y.len() != y_hat.len() || y.len() != weights.len() {
        return Err(Error::dim(
            "samples",
            format!(
                "{} targets, {} predictions, {} weights",
                y.len(),
                y_hat.len(),
                weights.len()
            ),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("sum of sample weights is zero".into()));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for ((t, p), w) in y.iter().zip(y_hat).zip(weights) {
        let e = p - t;
        abs += w * e.abs();
        sq += w * e * e;
    }
    Ok((abs / total, sq / total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub acc7: f64,
    pub acc9: f64,
    pub f1_7: f64,
    pub f1_9: f64,
    pub acc_pm1: f64,
}

impl MetricReport {
    /// Full metric suite from smoothed real-valued predictions. Regression
    /// metrics use the raw values, classification metrics the rounded ones.
    pub fn compute(y: &[i32], smoothed: &[f64], weights: &ClassWeights) -> Result<Self> {
        let w: Vec<f64> = y.iter().map(|c| weights.get(c).copied().unwrap_or(0.0)).collect();
        let yf: Vec<f64> = y.iter().map(|&c| c as f64).collect();
        let (mae, mse) = weighted_mae_mse(&yf, smoothed, &w)?;
        let pred: Vec<i32> = smoothed.iter().map(|&v| round_to_class(v)).collect();
        Ok(Self {
            mae,
            mse,
            acc7: balanced_accuracy(y, &pred, ClassSet::Seven)?,
            acc9: balanced_accuracy(y, &pred, ClassSet::Nine)?,
            f1_7: macro_f1(y, &pred, ClassSet::Seven)?,
            f1_9: macro_f1(y, &pred, ClassSet::Nine)?,
            acc_pm1: relaxed_accuracy(y, &pred)?,
        })
    }

    /// Field-wise unweighted mean.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::UndefinedMetric("mean of zero reports".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mae: avg(|r| r.mae),
            mse: avg(|r| r.mse),
            acc7: avg(|r| r.acc7),
            acc9: avg(|r| r.acc9),
            f1_7: avg(|r| r.f1_7),
            f1_9: avg(|r| r.f1_9),
            acc_pm1: avg(|r| r.acc_pm1),
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.mae,
            self.mse,
            self.acc7,
            self.acc9,
            self.f1_7,
            self.f1_9,
            self.acc_pm1,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}
