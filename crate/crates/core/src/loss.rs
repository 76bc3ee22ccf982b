//! The asymmetric relaxed regression loss and the binary cross-entropy used
//! for pretraining, both reduced with per-class sample weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClassWeights;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `(alpha + sign(e))^2 * max(0, e^2 - beta)` with `e = y_hat - y` and
/// `sign(0) = 0`.
pub fn custom_loss(y: f64, y_hat: f64, alpha: f64, beta: f64) -> f64 {
    let e = y_hat - y;
    let s = sign(e);
    (alpha + s).powi(2) * (e * e - beta).max(0.0)
}

fn sign(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "custom")]
    Custom,
    #[serde(rename = "custom-r")]
    CustomRelaxed,
}

impl LossVariant {
    pub fn alpha(self) -> f64 {
        match self {
            LossVariant::L2 => 0.0,
            LossVariant::Custom | LossVariant::CustomRelaxed => 0.25,
        }
    }

    pub fn beta(self) -> f64 {
        match self {
            LossVariant::CustomRelaxed => 0.25,
            LossVariant::L2 | LossVariant::Custom => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::L2 => "l2",
            LossVariant::Custom => "custom",
            LossVariant::CustomRelaxed => "custom-r",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "plain" => Ok(LossVariant::L2),
            "custom" => Ok(LossVariant::Custom),
            "custom-r" => Ok(LossVariant::CustomRelaxed),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub alpha: f64,
    pub beta: f64,
    pub class_weights: ClassWeights,
}

impl LossParams {
    pub fn new(alpha: f64, beta: f64, class_weights: ClassWeights) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1)")));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta {beta} must be >= 0")));
        }
        Ok(Self {
            alpha,
            beta,
            class_weights,
        })
    }

    pub fn for_variant(variant: LossVariant, class_weights: ClassWeights) -> Self {
        Self {
            alpha: variant.alpha(),
            beta: variant.beta(),
            class_weights,
        }
    }

    pub fn relaxed(&self) -> bool {
        self.beta > 0.0
    }

    pub fn weight(&self, class: i32) -> f64 {
        self.class_weights.get(&class).copied().unwrap_or(0.0)
    }

    pub fn loss(&self, y: f64, y_hat: f64) -> f64 {
        custom_loss(y, y_hat, self.alpha, self.beta)
    }
}

/// Normalized per-sample weights `w_i / sum(w)`.
fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("degenerate batch: every sample weight is zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn check_batch(tape: &Tape, pred: Var, n: usize) -> Result<Vec<usize>> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != n || shape[0] != n {
        return Err(Error::dim("batch", format!("predictions {shape:?} for {n} targets")));
    }
    Ok(shape)
}

/// `sum_i w(y_i) L(y_i, y_hat_i) / sum_i w(y_i)` on the tape, differentiable
/// in `pred` (shape `[B]` or `[B, 1]`).
pub fn weighted_batch_loss(tape: &mut Tape, pred: Var, y: &[i32], params: &LossParams) -> Result<Var> {
    let weights: Vec<f64> = y.iter().map(|&c| params.weight(c)).collect();
    weighted_loss_with(
        tape,
        pred,
        &y.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        &weights,
        params,
    )
}

/// Like [`weighted_batch_loss`] with explicit real targets and sample weights.
pub fn weighted_loss_with(tape: &mut Tape, pred: Var, y: &[f64], weights: &[f64], params: &LossParams) -> Result<Var> {
    let shape = check_batch(tape, pred, y.len())?;
    let w = normalized(weights)?;
    let target = tape.constant(Tensor::new(&shape, y.to_vec())?);
    let e = tape.sub(pred, target)?;
    let signs: Vec<f64> = tape.data(e).iter().map(|&v| sign(v)).collect();
    tape.note_branches(signs.iter().map(|&s| s > 0.0));
    tape.note_branches(signs.iter().map(|&s| s < 0.0));
    let coef: Vec<f64> = signs
        .iter()
        .zip(&w)
        .map(|(s, w)| w * (params.alpha + s).powi(2))
        .collect();
    let sq = tape.mul(e, e)?;
    let shifted = tape.add_scalar(sq, -params.beta);
    let hinge = tape.relu(shifted);
    let c = tape.constant(Tensor::new(&shape, coef)?);
    let terms = tape.mul(hinge, c)?;
    Ok(tape.sum(terms))
}

/// Weighted logistic cross-entropy `softplus(z) - t z` for logits `z` and
/// targets `t` in {0, 1}.
pub fn weighted_bce(tape: &mut Tape, logits: Var, targets: &[i32], weights: &ClassWeights) -> Result<Var> {
    let shape = check_batch(tape, logits, targets.len())?;
    let w: Vec<f64> = targets.iter().map(|c| weights.get(c).copied().unwrap_or(0.0)).collect();
    let w = normalized(&w)?;
    let t = tape.constant(Tensor::new(&shape, targets.iter().map(|&c| c as f64).collect())?);
    let sp = tape.softplus(logits);
    let tz = tape.mul(logits, t)?;
    let per = tape.sub(sp, tz)?;
    let wv = tape.constant(Tensor::new(&shape, w)?);
    let terms = tape.mul(per, wv)?;
    Ok(tape.sum(terms))
}
