//! Training-time input augmentation: additive Gaussian noise and block
//! permutation along time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub noise_sigma: f64,
    pub n_blocks: usize,
    /// Probability that a sample's blocks are permuted.
    pub permute_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            noise_sigma: 0.05,
            n_blocks: 5,
            permute_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.n_blocks == 0 || self.n_blocks > len || !len.is_multiple_of(self.n_blocks) {
            return Err(Error::Config(format!(
                "{} blocks do not evenly divide a window of {len}",
                self.n_blocks
            )));
        }
        if !(0.0..=1.0).contains(&self.permute_prob) {
            return Err(Error::Config(format!(
                "permutation probability {} outside [0, 1]",
                self.permute_prob
            )));
        }
        Ok(())
    }
}

/// Deterministic generator for one training sample.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a06d);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

pub fn add_noise(x: &mut Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    for v in x.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

/// Rearranges the time axis of a `[C, L]` tensor so that output block `i`
/// holds input block `perm[i]`, identically for every channel.
pub fn permute_blocks(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let [c, l] = match x.shape() {
        &[c, l] => [c, l],
        s => return Err(Error::dim("input rank", format!("expected [C, L], got {s:?}"))),
    };
    let n = perm.len();
    if n == 0 || l % n != 0 {
        return Err(Error::Config(format!("{n} blocks do not evenly divide length {l}")));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation")));
        }
    }
    let b = l / n;
    let src = x.data();
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        for (i, &p) in perm.iter().enumerate() {
            out[ch * l + i * b..][..b].copy_from_slice(&src[ch * l + p * b..][..b]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Draws a uniform permutation of `n_blocks` blocks and applies it.
pub fn block_permute(x: &Tensor, n_blocks: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..n_blocks).collect();
    perm.shuffle(rng);
    let out = permute_blocks(x, &perm)?;
    Ok((out, perm))
}

/// Applies the configured augmentations to one training window in place.
pub fn augment(x: &mut Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    if !cfg.enabled {
        return Ok(());
    }
    if cfg.permute_prob > 0.0 && rng.random::<f64>() < cfg.permute_prob {
        *x = block_permute(x, cfg.n_blocks, rng)?.0;
    }
    add_noise(x, cfg.noise_sigma, rng)
}
