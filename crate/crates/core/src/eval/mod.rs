//! Leave-one-subject-out evaluation: fold plans, epoch selection,
//! prediction smoothing, the leakage audit, and report rendering.

mod audit;
mod report;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audit::{Audit, ProvenanceEntry, Stage};
pub use report::{render_table, row_label, table_header, FoldReport, RunReport};
pub use run::{evaluate_dir, evaluate_run, train_run, FoldManifest, RunManifest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

/// One fold per subject, ordered by subject id.
pub fn make_folds(subjects: &[String]) -> Result<Vec<FoldPlan>> {
    let mut ids = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            ids.len()
        )));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(fold_id, test)| FoldPlan {
            fold_id,
            test_subject: test.clone(),
            train_subjects: ids.iter().filter(|s| *s != test).cloned().collect(),
        })
        .collect())
}

/// Mean of the per-fold curves, epoch by epoch.
pub fn mean_curve(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Contract("no validation curves to select from".into()))?;
    if first.is_empty() {
        return Err(Error::Contract("validation curves are empty".into()));
    }
    if let Some(c) = curves.iter().find(|c| c.len() != first.len()) {
        return Err(Error::Contract(format!(
            "folds trained different epoch counts ({} vs {})",
            first.len(),
            c.len()
        )));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / n)
        .collect())
}

/// Epoch with the lowest across-fold mean validation loss; ties go to the
/// earliest epoch.
pub fn select_epoch(curves: &[Vec<f64>]) -> Result<usize> {
    let mean = mean_curve(curves)?;
    if mean.iter().any(|v| v.is_nan()) {
        return Err(Error::UndefinedMetric("validation loss is NaN".into()));
    }
    let mut best = 0;
    for (e, &v) in mean.iter().enumerate() {
        if v < mean[best] {
            best = e;
        }
    }
    Ok(best)
}

/// Discrete Gaussian weights `exp(-j^2 / (2 sigma^2))` for
/// `j = -r..=r`, `r = ceil(4 sigma)`, not normalized.
pub fn gaussian_kernel(sigma_w: f64) -> Vec<f64> {
    if sigma_w <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma_w).ceil() as isize;
    (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma_w * sigma_w)).exp())
        .collect()
}

/// Gaussian smoothing of one subject's time-ordered predictions. Near the
/// edges the kernel is renormalized over the positions that exist.
pub fn smooth_predictions(preds: &[f64], sigma_w: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma_w);
    let r = (kernel.len() / 2) as isize;
    let n = preds.len() as isize;
    (0..n)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in -r..=r {
                let t = i + j;
                if (0..n).contains(&t) {
                    let k = kernel[(j + r) as usize];
                    num += k * preds[t as usize];
                    den += k;
                }
            }
            num / den
        })
        .collect()
}
