//! Run configuration, read from a TOML file with the sections `data`,
//! `model`, `augment`, `loss`, `optim`, `scheme` and `eval`. Every key is
//! optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::DEFAULT_N_QUANTILES;
use crate::error::{Error, Result};
use crate::loss::LossVariant;
use crate::models::{HeadKind, ModelKind, ModelSpec};
use crate::train::{LoopConfig, OptimConfig, SchemeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_quantiles: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_quantiles: DEFAULT_N_QUANTILES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dropblock: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::FcnPlusPlus,
            dropblock: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Width of the Gaussian smoothing kernel, in windows.
    pub sigma_w: f64,
    /// Every `val_stride`-th held-out window enters the validation loss.
    pub val_stride: usize,
    /// Also report metrics pooled over all test windows.
    pub pooled: bool,
    /// Folds trained concurrently; 0 uses every available core.
    pub jobs: usize,
    pub predict_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma_w: 2.0,
            val_stride: 1,
            pooled: false,
            jobs: 1,
            predict_batch: 16,
        }
    }
}

impl EvalConfig {
    pub fn jobs(&self) -> usize {
        match self.jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub scheme: SchemeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.scheme.validate()?;
        if self.data.n_quantiles < 2 {
            return Err(Error::Config("data.n_quantiles must be at least 2".into()));
        }
        if !(self.eval.sigma_w >= 0.0 && self.eval.sigma_w.is_finite()) {
            return Err(Error::Config(format!(
                "eval.sigma_w = {} must be >= 0",
                self.eval.sigma_w
            )));
        }
        if self.eval.val_stride == 0 || self.eval.predict_batch == 0 {
            return Err(Error::Config(
                "eval.val_stride and eval.predict_batch must be positive".into(),
            ));
        }
        self.spec(HeadKind::Regression).validate()
    }

    pub fn spec(&self, head: HeadKind) -> ModelSpec {
        let spec = ModelSpec::new(self.model.kind, head);
        if self.model.dropblock {
            spec
        } else {
            spec.without_dropblock()
        }
    }

    /// Loop settings for supervised training under `seed`.
    pub fn loop_config(&self, seed: u64) -> LoopConfig {
        LoopConfig {
            batch_size: self.scheme.batch_size,
            samples_per_epoch: self.scheme.samples_per_epoch,
            augment: self.augment,
            seed,
            predict_batch: self.eval.predict_batch,
        }
    }

    /// Loop settings for pretraining under `seed`.
    pub fn pretrain_loop_config(&self, seed: u64) -> LoopConfig {
        let mut cfg = self.loop_config(seed);
        cfg.samples_per_epoch = self.scheme.pretrain_samples_per_epoch;
        cfg.augment.enabled &= self.scheme.augment_pretrain;
        cfg
    }
}
