use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::LayerState;

/// Binary keep-masks for the pruned convolution kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub sparsity: f64,
    masks: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Names of masked parameters whose pruned positions are not exactly zero.
    pub fn violations(&self, state: &LayerState) -> Vec<String> {
        self.masks
            .iter()
            .filter(|(name, keep)| match state.param(name) {
                Ok(p) => p.tensor.data().iter().zip(keep.iter()).any(|(v, k)| !k && *v != 0.0),
                Err(_) => true,
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}

/// Number of weights kept in a tensor of `n` weights.
pub fn keep_count(n: usize, sparsity: f64) -> usize {
    // the tolerance keeps products like 0.3 * 10 from rounding up to 4
    (((1.0 - sparsity) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Magnitude-prunes every convolution kernel in place, keeping the
/// `keep_count` largest weights by absolute value (ties keep the earlier
/// index), and returns the masks.
pub fn prune(state: &mut LayerState, sparsity: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mut masks = BTreeMap::new();
    for (name, p) in state.params_mut() {
        if !p.kind.prunable() {
            continue;
        }
        let w = p.tensor.data_mut();
        let keep = keep_count(w.len(), sparsity);
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
        let mut mask = vec![false; w.len()];
        for &i in &order[..keep] {
            mask[i] = true;
        }
        for (v, &k) in w.iter_mut().zip(&mask) {
            if !k {
                *v = 0.0;
            }
        }
        masks.insert(name.to_string(), mask);
    }
    Ok(PruneMask { sparsity, masks })
}
