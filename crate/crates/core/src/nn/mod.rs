//! Layer building blocks and the state they share.
//!
//! Parameters and buffers live in a [`LayerState`] keyed by dotted names
//! (`block1.branch0.pw.weight`). A [`Session`] binds them to a [`Tape`]
//! lazily for one forward pass, so only parameters that a forward pass
//! actually touches appear on the tape.

mod layers;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use layers::{
    dropblock_mask, global_avg_pool, BatchNorm1d, ChannelAttention, Conv1d, DepthwiseSeparable, DropBlock1d, Layer,
    Linear, SpatialAttention, BN_EPS, BN_MOMENTUM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Role of a parameter; decides weight decay and pruning eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Kernel of a feature-extracting convolution (full, depthwise, pointwise).
    ConvKernel,
    /// Kernel inside a channel or spatial attention module.
    AttentionKernel,
    LinearWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::ConvKernel | ParamKind::AttentionKernel | ParamKind::LinearWeight
        )
    }

    pub fn prunable(self) -> bool {
        self == ParamKind::ConvKernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named parameters, named non-trainable buffers, and the train/eval mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerState {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
    pub mode: Mode,
}

impl LayerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Param { tensor, kind });
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer `{name}`")))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Removes every parameter and buffer whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }
}

/// Kaiming-uniform initialization for a relu-followed layer:
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("uniform: positive shape")
}

/// One forward pass: a tape, the state it reads from, and the randomness
/// used by stochastic layers.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    state: &'a mut LayerState,
    bound: HashMap<String, Var>,
    rng: Option<&'a mut ChaCha8Rng>,
    frozen_params: bool,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, state: &'a mut LayerState) -> Self {
        Self {
            tape,
            state,
            bound: HashMap::new(),
            rng: None,
            frozen_params: false,
        }
    }

    pub fn with_rng(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Binds parameters as constants, for inference without gradients.
    pub fn frozen(mut self) -> Self {
        self.frozen_params = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    /// The tape variable for parameter `name`, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self.state.param(name)?.tensor.clone();
        let v = if self.frozen_params {
            self.tape.constant(tensor)
        } else {
            self.tape.param(tensor)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` in place of parameter `name` for the rest of the pass.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let expected = self.state.param(name)?.tensor.shape();
        if expected != self.tape.shape(var) {
            return Err(Error::dim(
                name,
                format!("bound {:?}, parameter is {expected:?}", self.tape.shape(var)),
            ));
        }
        self.bound.insert(name.to_string(), var);
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.state.buffer(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.state.buffer_mut(name)
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_params_and_buffers() {
        let mut s = LayerState::new();
        s.add_param("a.w", Tensor::zeros(&[2]), ParamKind::ConvKernel).unwrap();
        assert!(s.add_param("a.w", Tensor::zeros(&[2]), ParamKind::Bias).is_err());
        assert!(s.add_buffer("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.param_count(), 2);
        s.add_buffer("a.running_mean", Tensor::zeros(&[5])).unwrap();
        assert_eq!(s.param_count(), 2, "buffers are not parameters");
    }

    #[test]
    fn decay_and_pruning_roles() {
        assert!(ParamKind::ConvKernel.prunable());
        assert!(!ParamKind::AttentionKernel.prunable());
        assert!(!ParamKind::NormScale.decays());
        assert!(!ParamKind::Bias.decays());
        assert!(ParamKind::LinearWeight.decays());
    }
}
