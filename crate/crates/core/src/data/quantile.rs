use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_N_QUANTILES: usize = 1000;

/// Per-channel empirical quantiles mapping values to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    /// Reference positions `0, 1/(n-1), ..., 1`.
    pub references: Vec<f64>,
    /// `values[c][i]` is the channel-`c` quantile at `references[i]`.
    pub values: Vec<Vec<f64>>,
}

/// Linear-interpolated percentile of sorted data at `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn fit_quantile_map(channels: &[&[f64]], n_quantiles: usize) -> Result<QuantileMap> {
    if n_quantiles < 2 {
        return Err(Error::Config(format!("need at least 2 quantiles, got {n_quantiles}")));
    }
    if channels.is_empty() || channels.iter().any(|c| c.is_empty()) {
        return Err(Error::Data("quantile map fit on empty data".into()));
    }
    let references: Vec<f64> = (0..n_quantiles).map(|i| i as f64 / (n_quantiles - 1) as f64).collect();
    let mut values = Vec::with_capacity(channels.len());
    for c in channels {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("quantile map fit on non-finite values".into()));
        }
        let mut sorted = c.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        values.push(references.iter().map(|&q| percentile(&sorted, q)).collect());
    }
    Ok(QuantileMap { references, values })
}

impl QuantileMap {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    /// Position of `v` on the channel's interpolated empirical CDF. Runs of
    /// tied quantiles map to the middle of their reference range; values
    /// outside the fitted range clamp to 0 or 1.
    pub fn apply_one(&self, channel: usize, v: f64) -> f64 {
        let q = &self.values[channel];
        let r = &self.references;
        let last = q.len() - 1;
        if v <= q[0] {
            return 0.0;
        }
        if v >= q[last] {
            return 1.0;
        }
        let interp = |i: usize| -> f64 {
            let (a, b) = (q[i - 1], q[i]);
            r[i - 1] + (v - a) / (b - a) * (r[i] - r[i - 1])
        };
        // first index with q > v, and first index with q >= v
        let upper = q.partition_point(|&x| x <= v);
        let lower = q.partition_point(|&x| x < v);
        0.5 * (interp(upper) + interp(lower))
    }

    pub fn apply(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply_one(channel, v)).collect()
    }
}
