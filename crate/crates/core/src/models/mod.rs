//! The baseline FCN and the dilated Inception networks FCN+ and FCN++.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, BatchNorm1d, ChannelAttention, Conv1d, DepthwiseSeparable, DropBlock1d, Layer, LayerState, Linear,
    Mode, ParamKind, Session, SpatialAttention,
};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "fcn")]
    Fcn,
    #[serde(rename = "fcn+", alias = "fcn_plus")]
    FcnPlus,
    #[serde(rename = "fcn++", alias = "fcn_plus_plus")]
    FcnPlusPlus,
}

impl ModelKind {
    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Fcn => "FCN",
            ModelKind::FcnPlus => "FCN+",
            ModelKind::FcnPlusPlus => "FCN++",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fcn => "fcn",
            ModelKind::FcnPlus => "fcn+",
            ModelKind::FcnPlusPlus => "fcn++",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(ModelKind::Fcn),
            "fcn+" | "fcn_plus" => Ok(ModelKind::FcnPlus),
            "fcn++" | "fcn_plus_plus" => Ok(ModelKind::FcnPlusPlus),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    Binary,
}

impl HeadKind {
    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Regression => "head.regression",
            HeadKind::Binary => "head.binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBlockSpec {
    pub rate: f64,
    pub block_size: usize,
}

impl Default for DropBlockSpec {
    fn default() -> Self {
        Self {
            rate: 0.2,
            block_size: 7,
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub head: HeadKind,
    pub in_channels: usize,
    pub n_blocks: usize,
    pub branch_width: usize,
    pub block_out_channels: usize,
    pub branch_kernels: Vec<usize>,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    pub fcn_channels: Vec<usize>,
    pub fcn_kernels: Vec<usize>,
    pub dropblock: Option<DropBlockSpec>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, head: HeadKind) -> Self {
        Self {
            kind,
            head,
            in_channels: 2,
            n_blocks: 3,
            branch_width: 22,
            block_out_channels: 88,
            branch_kernels: vec![3, 5, 9, 17],
            attention_reduction: 2,
            spatial_kernel: 7,
            fcn_channels: vec![128, 256, 128],
            fcn_kernels: vec![8, 5, 3],
            dropblock: Some(DropBlockSpec::default()),
        }
    }

    pub fn fcn(head: HeadKind) -> Self {
        Self::new(ModelKind::Fcn, head)
    }

    pub fn fcn_plus(head: HeadKind) -> Self {
        Self::new(ModelKind::FcnPlus, head)
    }

    pub fn fcn_plus_plus(head: HeadKind) -> Self {
        Self::new(ModelKind::FcnPlusPlus, head)
    }

    pub fn without_dropblock(mut self) -> Self {
        self.dropblock = None;
        self
    }

    /// Dilation of Inception block `i`: 1 for the first block, `2^i` after.
    pub fn dilation(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            1 << i
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        match self.kind {
            ModelKind::Fcn => {
                if self.fcn_channels.is_empty() || self.fcn_channels.len() != self.fcn_kernels.len() {
                    return Err(Error::Config("fcn_channels and fcn_kernels must pair up".into()));
                }
            }
            ModelKind::FcnPlus | ModelKind::FcnPlusPlus => {
                if self.branch_kernels.len() != 4 {
                    return Err(Error::Config(format!(
                        "expected four branch kernels, got {}",
                        self.branch_kernels.len()
                    )));
                }
                if self.block_out_channels != 4 * self.branch_width {
                    return Err(Error::Config(format!(
                        "block_out_channels {} must equal 4 * branch_width {}",
                        self.block_out_channels, self.branch_width
                    )));
                }
                if self.n_blocks == 0 {
                    return Err(Error::Config("at least one block is required".into()));
                }
            }
        }
        Ok(())
    }

    fn channel_attention(&self) -> bool {
        self.kind == ModelKind::FcnPlusPlus
    }
}

struct FcnStage {
    conv: Conv1d,
    bn: BatchNorm1d,
}

struct Branch {
    reduce: Conv1d,
    separable: DepthwiseSeparable,
    bn: BatchNorm1d,
}

pub struct InceptionBlock {
    branches: Vec<Branch>,
    residual: Conv1d,
    bn: BatchNorm1d,
    channel: Option<ChannelAttention>,
    spatial: Option<SpatialAttention>,
}

impl InceptionBlock {
    pub fn new(spec: &ModelSpec, index: usize, cin: usize) -> Result<Self> {
        let w = spec.branch_width;
        let d = ModelSpec::dilation(index);
        let name = format!("block{index}");
        let branches = spec
            .branch_kernels
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let bname = format!("{name}.branch{j}");
                Ok(Branch {
                    reduce: Conv1d::pointwise(format!("{bname}.reduce"), cin, w),
                    separable: DepthwiseSeparable::new(&format!("{bname}.sep"), w, w, k, d)?,
                    bn: BatchNorm1d::new(format!("{bname}.bn"), w),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = spec.block_out_channels;
        let attend = index + 1 < spec.n_blocks;
        Ok(Self {
            branches,
            residual: Conv1d::pointwise(format!("{name}.residual"), cin, out),
            bn: BatchNorm1d::new(format!("{name}.bn"), out),
            channel: if attend && spec.channel_attention() {
                Some(ChannelAttention::new(
                    format!("{name}.ca"),
                    out,
                    spec.attention_reduction,
                )?)
            } else {
                None
            },
            spatial: if attend {
                Some(SpatialAttention::new(format!("{name}.sa"), spec.spatial_kernel)?)
            } else {
                None
            },
        })
    }

    pub fn forward_with(&self, sess: &mut Session<'_>, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let h = b.reduce.forward(sess, x)?;
            let h = b.separable.forward(sess, h)?;
            let h = b.bn.forward(sess, h)?;
            outs.push(sess.tape.relu(h));
        }
        let cat = sess.tape.concat(&outs, 1)?;
        let skip = self.residual.forward(sess, x)?;
        let sum = sess.tape.add(cat, skip)?;
        let h = self.bn.forward(sess, sum)?;
        let mut h = sess.tape.relu(h);
        if let Some(ca) = &self.channel {
            if !opts.open_channel_gates {
                h = ca.forward(sess, h)?;
            }
        }
        if let Some(sa) = &self.spatial {
            h = sa.forward(sess, h)?;
        }
        Ok(h)
    }
}

impl Layer for InceptionBlock {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        for b in &self.branches {
            b.reduce.register(state, rng)?;
            b.separable.register(state, rng)?;
            b.bn.register(state, rng)?;
        }
        self.residual.register(state, rng)?;
        self.bn.register(state, rng)?;
        if let Some(ca) = &self.channel {
            ca.register(state, rng)?;
        }
        if let Some(sa) = &self.spatial {
            sa.register(state, rng)?;
        }
        Ok(())
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward_with(sess, x, &ForwardOptions::default())
    }
}

enum Body {
    Fcn(Vec<FcnStage>),
    Inception(Vec<InceptionBlock>),
}

/// Forward-pass switches used by ablation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Treat every channel-attention gate as fully open (gate = 1).
    pub open_channel_gates: bool,
}

/// Layer structure derived from a [`ModelSpec`].
pub struct Architecture {
    body: Body,
    dropblock: Option<DropBlock1d>,
    head: Linear,
}

impl Architecture {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (body, features) = match spec.kind {
            ModelKind::Fcn => {
                let mut cin = spec.in_channels;
                let mut stages = Vec::new();
                for (i, (&c, &k)) in spec.fcn_channels.iter().zip(&spec.fcn_kernels).enumerate() {
                    let mut conv = Conv1d::new(format!("conv{i}"), cin, c, k);
                    // The input convolution carries a bias.
                    if i == 0 {
                        conv = conv.with_bias();
                    }
                    stages.push(FcnStage {
                        conv,
                        bn: BatchNorm1d::new(format!("bn{i}"), c),
                    });
                    cin = c;
                }
                (Body::Fcn(stages), cin)
            }
            ModelKind::FcnPlus | ModelKind::FcnPlusPlus => {
                let mut cin = spec.in_channels;
                let mut blocks = Vec::new();
                for i in 0..spec.n_blocks {
                    blocks.push(InceptionBlock::new(spec, i, cin)?);
                    cin = spec.block_out_channels;
                }
                (Body::Inception(blocks), cin)
            }
        };
        let dropblock = match spec.dropblock {
            Some(d) if d.rate > 0.0 => Some(DropBlock1d::new(d.rate, d.block_size)?),
            _ => None,
        };
        Ok(Self {
            body,
            dropblock,
            head: Linear::new(spec.head.prefix(), features, 1),
        })
    }

    fn register_body(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        match &self.body {
            Body::Fcn(stages) => {
                for s in stages {
                    s.conv.register(state, rng)?;
                    s.bn.register(state, rng)?;
                }
            }
            Body::Inception(blocks) => {
                for b in blocks {
                    b.register(state, rng)?;
                }
            }
        }
        Ok(())
    }

    /// Pooled body features `[B, C]`.
    pub fn features(&self, sess: &mut Session<'_>, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let mut h = x;
        match &self.body {
            Body::Fcn(stages) => {
                for s in stages {
                    h = s.conv.forward(sess, h)?;
                    h = s.bn.forward(sess, h)?;
                    h = sess.tape.relu(h);
                }
            }
            Body::Inception(blocks) => {
                for b in blocks {
                    h = b.forward_with(sess, h, opts)?;
                }
            }
        }
        if let Some(db) = &self.dropblock {
            h = db.forward(sess, h)?;
        }
        global_avg_pool(sess.tape, h)
    }

    /// `[B, C_in, L] -> [B, 1]`.
    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward_with(sess, x, &ForwardOptions::default())
    }

    pub fn forward_with(&self, sess: &mut Session<'_>, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let f = self.features(sess, x, opts)?;
        self.head.forward(sess, f)
    }
}

/// An architecture with its parameters and buffers.
pub struct Model {
    pub spec: ModelSpec,
    pub state: LayerState,
    arch: Architecture,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            state: self.state.clone(),
            arch: Architecture::new(&self.spec).expect("spec validated at build"),
        }
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Model {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with(spec, &mut rng)
    }

    pub fn build_with(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let arch = Architecture::new(spec)?;
        let mut state = LayerState::new();
        arch.register_body(&mut state, rng)?;
        arch.head.register(&mut state, rng)?;
        Ok(Self {
            spec: spec.clone(),
            state,
            arch,
        })
    }

    /// Assembles a model from existing state, checking that the parameter
    /// names and shapes match the spec.
    pub fn from_state(spec: &ModelSpec, state: LayerState) -> Result<Self> {
        let reference = Self::build(spec, 0)?;
        let expect: Vec<(&str, &[usize])> = reference.state.params().map(|(n, p)| (n, p.tensor.shape())).collect();
        let got: Vec<(&str, &[usize])> = state.params().map(|(n, p)| (n, p.tensor.shape())).collect();
        if expect != got {
            return Err(Error::Data("checkpoint parameters do not match the model spec".into()));
        }
        let expect: Vec<&str> = reference.state.buffers().map(|(n, _)| n).collect();
        let got: Vec<&str> = state.buffers().map(|(n, _)| n).collect();
        if expect != got {
            return Err(Error::Data("checkpoint buffers do not match the model spec".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            state,
            arch: reference.arch,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Borrows the architecture and the mutable state together, for
    /// building a [`Session`].
    pub fn parts(&mut self) -> (&Architecture, &mut LayerState) {
        (&self.arch, &mut self.state)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.state.param_count()
    }

    /// Eval-mode predictions for a `[B, C, L]` batch, one value per sample.
    pub fn predict(&mut self, x: Tensor) -> Result<Vec<f64>> {
        let previous = self.state.mode;
        self.state.mode = Mode::Eval;
        let mut tape = Tape::new();
        let (arch, state) = self.parts();
        let mut sess = Session::new(&mut tape, state).frozen();
        let xv = sess.tape.constant(x);
        let out = arch.forward(&mut sess, xv);
        self.state.mode = previous;
        let out = out?;
        Ok(tape.data(out).to_vec())
    }

    /// Pooled eval-mode features for a batch, `[B, C]` flattened.
    pub fn features(&mut self, x: Tensor) -> Result<Vec<f64>> {
        let previous = self.state.mode;
        self.state.mode = Mode::Eval;
        let mut tape = Tape::new();
        let (arch, state) = self.parts();
        let mut sess = Session::new(&mut tape, state).frozen();
        let xv = sess.tape.constant(x);
        let out = arch.features(&mut sess, xv, &ForwardOptions::default());
        self.state.mode = previous;
        let out = out?;
        Ok(tape.data(out).to_vec())
    }

    /// Replaces the head with a freshly initialized one of kind `head`,
    /// keeping every body parameter and buffer.
    pub fn swap_head(&self, head: HeadKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.head = head;
        let arch = Architecture::new(&spec)?;
        let mut state = self.state.clone();
        state.remove_prefix("head.");
        arch.head.register(&mut state, rng)?;
        Ok(Self { spec, state, arch })
    }

    /// Sum of parameter counts of the given kind.
    pub fn count_of(&self, kind: ParamKind) -> usize {
        self.state
            .params()
            .filter(|(_, p)| p.kind == kind)
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }
}

/// Input span seen by one output position of the body, following the widest
/// branch of every block: `1 + sum (k - 1) * d` over the convolutions.
pub fn receptive_field(spec: &ModelSpec) -> usize {
    receptive_field_with(spec, ModelSpec::dilation)
}

/// The same span with every dilation set to 1.
pub fn receptive_field_undilated(spec: &ModelSpec) -> usize {
    receptive_field_with(spec, |_| 1)
}

fn receptive_field_with(spec: &ModelSpec, dilation: impl Fn(usize) -> usize) -> usize {
    match spec.kind {
        ModelKind::Fcn => 1 + spec.fcn_kernels.iter().map(|k| k - 1).sum::<usize>(),
        ModelKind::FcnPlus | ModelKind::FcnPlusPlus => {
            let widest = spec.branch_kernels.iter().copied().max().unwrap_or(1);
            1 + (0..spec.n_blocks).map(|i| (widest - 1) * dilation(i)).sum::<usize>()
        }
    }
}
