//! Optimizer, training loop, pretraining on the cohort task, and
//! prune-and-retrain.

mod optim;
mod prune;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, sample_rng, AugmentConfig};
use crate::data::{class_weights, extract_window, ClassWeights, Preprocessed, QuantileMap};
use crate::error::{Error, Result};
use crate::loss::{weighted_batch_loss, weighted_bce, LossParams};
use crate::models::{HeadKind, Model, ModelSpec};
use crate::nn::{Mode, Session};
use crate::tensor::{Tape, Tensor, Var};

pub use optim::{Moments, OptimConfig, Padam};
pub use prune::{keep_count, prune, PruneMask};

/// Generator for stream `index` of purpose `tag` under `seed`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    None,
    Pre,
    Post,
    Pp,
}

impl Scheme {
    pub fn pretrains(self) -> bool {
        matches!(self, Scheme::Pre | Scheme::Pp)
    }

    pub fn prunes(self) -> bool {
        matches!(self, Scheme::Post | Scheme::Pp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Pre => "pre",
            Scheme::Post => "post",
            Scheme::Pp => "pp",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "pre" => Ok(Scheme::Pre),
            "post" => Ok(Scheme::Post),
            "pp" => Ok(Scheme::Pp),
            other => Err(Error::Config(format!("unknown scheme `{other}` (none, pre, post, pp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub epochs_dense: usize,
    pub epochs_sparse: usize,
    pub epochs_pretrain: usize,
    pub batch_size: usize,
    /// Caps the number of windows drawn per epoch; `None` uses every window.
    pub samples_per_epoch: Option<usize>,
    pub pretrain_samples_per_epoch: Option<usize>,
    pub sparsity: f64,
    pub augment_pretrain: bool,
    pub seed: u64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::None,
            epochs_dense: 50,
            epochs_sparse: 25,
            epochs_pretrain: 20,
            batch_size: 128,
            samples_per_epoch: None,
            pretrain_samples_per_epoch: None,
            sparsity: 0.75,
            augment_pretrain: true,
            seed: 0,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs_dense == 0 {
            return Err(Error::Config("at least one dense epoch is required".into()));
        }
        if self.scheme.prunes() && self.epochs_sparse == 0 {
            return Err(Error::Config(format!("scheme {} needs epochs_sparse > 0", self.scheme)));
        }
        if self.scheme.pretrains() && self.epochs_pretrain == 0 {
            return Err(Error::Config(format!(
                "scheme {} needs epochs_pretrain > 0",
                self.scheme
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if self.samples_per_epoch == Some(0) || self.pretrain_samples_per_epoch == Some(0) {
            return Err(Error::Config("samples per epoch must be positive".into()));
        }
        Ok(())
    }

    /// Total supervised epochs: dense plus, when pruning, sparse.
    pub fn supervised_epochs(&self) -> usize {
        self.epochs_dense + if self.scheme.prunes() { self.epochs_sparse } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Dense,
    Sparse,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Dense => 2,
            Phase::Sparse => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Motor-state label of the window.
    Motor,
    /// Cohort group of the subject, 1 for PD and 0 for control.
    Cohort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub subject_id: String,
    pub start: usize,
    pub target: i32,
}

/// Normalized series and the windows drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    window_len: usize,
    series: BTreeMap<String, [Vec<f64>; 2]>,
    items: Vec<Item>,
}

impl WindowSet {
    pub fn new(window_len: usize) -> Self {
        Self {
            window_len,
            series: BTreeMap::new(),
            items: Vec::new(),
        }
    }

    /// Adds a subject's normalized series with windows at `starts`.
    pub fn add_subject(&mut self, id: &str, series: [Vec<f64>; 2], windows: &[(usize, i32)]) -> Result<()> {
        if self.series.contains_key(id) {
            return Err(Error::Contract(format!("subject {id} added twice")));
        }
        let n = series[0].len().min(series[1].len());
        for &(start, target) in windows {
            if start + self.window_len > n {
                return Err(Error::dim("time", format!("window at {start} of {id} runs past {n}")));
            }
            self.items.push(Item {
                subject_id: id.to_string(),
                start,
                target,
            });
        }
        self.series.insert(id.to_string(), series);
        Ok(())
    }

    /// Windows of `subjects` from `prep`, normalized by `map`. Every
    /// `stride`-th window of each subject is kept.
    pub fn from_preprocessed(
        prep: &Preprocessed,
        subjects: &[String],
        map: &QuantileMap,
        target: Target,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("window stride must be positive".into()));
        }
        let mut out = Self::new(prep.window_len());
        for id in subjects {
            let raw = prep
                .series
                .get(id)
                .ok_or_else(|| Error::Data(format!("no series for subject {id}")))?;
            let windows: Vec<(usize, i32)> = prep
                .windows
                .iter()
                .filter(|w| &w.subject_id == id)
                .filter_map(|w| match target {
                    Target::Motor => w.label.map(|l| (w.start, l)),
                    Target::Cohort => Some((w.start, w.group.target())),
                })
                .step_by(stride)
                .collect();
            let series = [map.apply(0, &raw[0]), map.apply(1, &raw[1])];
            out.add_subject(id, series, &windows)?;
        }
        Ok(out)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn targets(&self) -> Vec<i32> {
        self.items.iter().map(|i| i.target).collect()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.series.keys().cloned().collect()
    }

    /// `[2, L]` input of item `i`.
    pub fn window(&self, i: usize) -> Result<Tensor> {
        let item = self
            .items
            .get(i)
            .ok_or_else(|| Error::Contract(format!("window index {i} of {}", self.items.len())))?;
        let s = &self.series[&item.subject_id];
        extract_window(&s[0], &s[1], item.start, self.window_len)
    }

    /// Stacks windows into a `[B, 2, L]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        stack(indices.iter().map(|&i| self.window(i)), self.window_len)
    }
}

fn stack(windows: impl Iterator<Item = Result<Tensor>>, len: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    for w in windows {
        data.extend_from_slice(w?.data());
        b += 1;
    }
    Tensor::new(&[b, 2, len], data)
}

/// What a run minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Regression(LossParams),
    Binary(ClassWeights),
}

impl Objective {
    pub fn head(&self) -> HeadKind {
        match self {
            Objective::Regression(_) => HeadKind::Regression,
            Objective::Binary(_) => HeadKind::Binary,
        }
    }

    fn batch_loss(&self, tape: &mut Tape, out: Var, y: &[i32]) -> Result<Var> {
        match self {
            Objective::Regression(p) => weighted_batch_loss(tape, out, y, p),
            Objective::Binary(w) => weighted_bce(tape, out, y, w),
        }
    }

    /// Weighted mean loss of finished predictions, matching the batch loss.
    pub fn loss(&self, pred: &[f64], y: &[i32]) -> Result<f64> {
        if pred.len() != y.len() {
            return Err(Error::dim(
                "batch",
                format!("{} predictions for {} targets", pred.len(), y.len()),
            ));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (&p, &t) in pred.iter().zip(y) {
            let (w, l) = match self {
                Objective::Regression(params) => (params.weight(t), params.loss(t as f64, p)),
                Objective::Binary(weights) => {
                    let w = weights.get(&t).copied().unwrap_or(0.0);
                    let sp = if p > 0.0 {
                        p + (-p).exp().ln_1p()
                    } else {
                        p.exp().ln_1p()
                    };
                    (w, sp - t as f64 * p)
                }
            };
            num += w * l;
            den += w;
        }
        if den <= 0.0 {
            return Err(Error::UndefinedMetric("every sample has zero weight".into()));
        }
        Ok(num / den)
    }
}

/// Settings shared by every phase of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub samples_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Batch size for eval-mode prediction.
    pub predict_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Index within the run's supervised epochs (dense then sparse), or
    /// within pretraining.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Number of optimizer steps in an epoch of `n` windows.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Eval-mode predictions for every window of `data`, in item order.
pub fn predict(model: &mut Model, data: &WindowSet, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(model.predict(data.batch(chunk)?)?);
    }
    Ok(out)
}

/// One training step on the windows `indices`; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut Padam,
    data: &WindowSet,
    indices: &[usize],
    positions: std::ops::Range<usize>,
    objective: &Objective,
    cfg: &LoopConfig,
    phase: Phase,
    epoch: usize,
    mask: Option<&PruneMask>,
) -> Result<f64> {
    let seed = cfg.seed ^ phase.tag();
    let mut windows = Vec::with_capacity(indices.len());
    for (&i, pos) in indices.iter().zip(positions.clone()) {
        let mut x = data.window(i)?;
        augment(&mut x, &cfg.augment, &mut sample_rng(seed, epoch, pos))?;
        windows.push(Ok(x));
    }
    let x = stack(windows.into_iter(), data.window_len())?;
    let y: Vec<i32> = indices.iter().map(|&i| data.items[i].target).collect();
    model.set_mode(Mode::Train);
    let mut rng = stream_rng(
        cfg.seed,
        0x0d_b10c + phase.tag(),
        ((epoch as u64) << 32) | positions.start as u64,
    );
    let mut tape = Tape::new();
    let (arch, state) = model.parts();
    let mut sess = Session::new(&mut tape, state).with_rng(&mut rng);
    let xv = sess.tape.constant(x);
    let out = arch.forward(&mut sess, xv)?;
    let loss = objective.batch_loss(sess.tape, out, &y)?;
    let value = sess.tape.data(loss)[0];
    sess.tape.backward(loss)?;
    let grads = sess.gradients();
    drop(sess);
    opt.step(&mut model.state, &grads, mask)?;
    Ok(value)
}

/// Runs `epochs` shuffled passes over `data`. `first_epoch` numbers the
/// epochs and seeds their shuffles; `on_epoch` sees every finished epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_epochs(
    model: &mut Model,
    opt: &mut Padam,
    data: &WindowSet,
    val: Option<&WindowSet>,
    objective: &Objective,
    cfg: &LoopConfig,
    phase: Phase,
    first_epoch: usize,
    epochs: usize,
    mask: Option<&PruneMask>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(Error::Data("training set has no windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut records = Vec::with_capacity(epochs);
    for epoch in first_epoch..first_epoch + epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, 0x5_4ff1e + phase.tag(), epoch as u64));
        if let Some(n) = cfg.samples_per_epoch {
            order.truncate(n);
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = b * cfg.batch_size;
            let positions = start..start + chunk.len();
            let loss = train_step(model, opt, data, chunk, positions, objective, cfg, phase, epoch, mask)?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => {
                let pred = predict(model, v, cfg.predict_batch)?;
                Some(objective.loss(&pred, &v.targets())?)
            }
            _ => None,
        };
        let record = EpochRecord {
            phase,
            epoch,
            train_loss,
            val_loss,
        };
        log::info!(
            "stage={} epoch={} train_loss={:.6} val_loss={}",
            serde_json::to_string(&phase)?.trim_matches('"'),
            epoch,
            train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.6}"))
        );
        on_epoch(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

/// Trains `spec` with a binary head on the cohort task and returns the
/// trained model with its per-epoch records.
pub fn pretrain(
    spec: &ModelSpec,
    data: &WindowSet,
    optim: OptimConfig,
    cfg: &LoopConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<(Model, Vec<EpochRecord>)> {
    let targets = data.targets();
    let groups: BTreeSet<i32> = targets.iter().copied().collect();
    if groups.len() < 2 {
        return Err(Error::Data(format!(
            "pretraining needs both PD and control subjects, found only {groups:?}"
        )));
    }
    let mut spec = spec.clone();
    spec.head = HeadKind::Binary;
    let mut model = Model::build(&spec, cfg.seed ^ 0x0070_7265)?;
    let objective = Objective::Binary(class_weights(&targets));
    let mut opt = Padam::new(optim)?;
    let records = run_epochs(
        &mut model,
        &mut opt,
        data,
        None,
        &objective,
        cfg,
        Phase::Pretrain,
        0,
        epochs,
        None,
        on_epoch,
    )?;
    Ok((model, records))
}

/// Result of supervised training under a scheme.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub mask: Option<PruneMask>,
}

/// Dense training from `init`, followed by pruning and sparse retraining
/// when the scheme asks for it. The optimizer state carries over into the
/// sparse phase with pruned moments zeroed.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    init: Model,
    data: &WindowSet,
    val: Option<&WindowSet>,
    loss: &LossParams,
    scheme: &SchemeConfig,
    optim: OptimConfig,
    cfg: &LoopConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<Trained> {
    scheme.validate()?;
    if init.spec.head != HeadKind::Regression {
        return Err(Error::Contract("supervised training needs a regression head".into()));
    }
    let mut model = init;
    let objective = Objective::Regression(loss.clone());
    let mut opt = Padam::new(optim)?;
    let mut records = run_epochs(
        &mut model,
        &mut opt,
        data,
        val,
        &objective,
        cfg,
        Phase::Dense,
        0,
        scheme.epochs_dense,
        None,
        on_epoch,
    )?;
    let mut mask = None;
    if scheme.scheme.prunes() {
        let m = prune(&mut model.state, scheme.sparsity)?;
        opt.apply_mask(&m);
        log::info!("stage=prune kernels={} sparsity={}", m.len(), m.sparsity);
        records.extend(run_epochs(
            &mut model,
            &mut opt,
            data,
            val,
            &objective,
            cfg,
            Phase::Sparse,
            scheme.epochs_dense,
            scheme.epochs_sparse,
            Some(&m),
            on_epoch,
        )?);
        mask = Some(m);
    }
    Ok(Trained { model, records, mask })
}
