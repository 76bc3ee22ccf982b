use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PruneMask;
use crate::error::{Error, Result};
use crate::nn::LayerState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Exponent applied to the bias-corrected second moment.
    pub p_adaptive: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 5e-3,
            weight_decay: 5e-6,
            p_adaptive: 0.4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("optimizer {what} = {v} out of range")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !(self.eps > 0.0) {
            return bad("eps", self.eps);
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay);
        }
        if !(0.0..=0.5).contains(&self.p_adaptive) {
            return bad("p_adaptive", self.p_adaptive);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with a partially adaptive denominator `v_hat^p + eps` and decoupled
/// weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Padam {
    pub config: OptimConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Padam {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Zeroes both moments wherever `mask` prunes.
    pub fn apply_mask(&mut self, mask: &PruneMask) {
        for (name, keep) in mask.iter() {
            if let Some(mo) = self.moments.get_mut(name) {
                for (i, &k) in keep.iter().enumerate() {
                    if !k {
                        mo.m[i] = 0.0;
                        mo.v[i] = 0.0;
                    }
                }
            }
        }
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// an entry in `grads` are left untouched. Gradients of masked
    /// parameters are multiplied by the mask first.
    pub fn step(
        &mut self,
        state: &mut LayerState,
        grads: &BTreeMap<String, Vec<f64>>,
        mask: Option<&PruneMask>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = state.param(name)?;
            if g.len() != p.tensor.numel() {
                return Err(Error::dim(
                    name.as_str(),
                    format!("gradient has {} elements, parameter {}", g.len(), p.tensor.numel()),
                ));
            }
            let count = g.iter().filter(|v| !v.is_finite()).count();
            if count > 0 {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                    count,
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let param = state.param_mut(name)?;
            let decay = if param.kind.decays() { c.weight_decay } else { 0.0 };
            let keep = mask.and_then(|m| m.get(name));
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let theta = param.tensor.data_mut();
            for i in 0..g.len() {
                let gi = match keep {
                    Some(k) if !k[i] => 0.0,
                    _ => g[i],
                };
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * gi;
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                theta[i] -= c.lr * m_hat / (v_hat.powf(c.p_adaptive) + c.eps) + c.lr * decay * theta[i];
            }
        }
        Ok(())
    }
}
