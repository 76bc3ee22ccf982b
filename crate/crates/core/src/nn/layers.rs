use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{kaiming_uniform, uniform, LayerState, Mode, ParamKind, Session};
use crate::error::{Error, Result};
use crate::tensor::{Conv1dOptions, NormStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub trait Layer {
    /// Adds this layer's parameters and buffers to `state`.
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()>;

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var>;
}

/// Same-padded 1D convolution.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub kind: ParamKind,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            dilation: 1,
            groups: 1,
            bias: false,
            kind: ParamKind::ConvKernel,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1)
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn kind(mut self, kind: ParamKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn options(&self) -> Conv1dOptions {
        Conv1dOptions {
            dilation: self.dilation,
            groups: self.groups,
            ..Default::default()
        }
    }
}

impl Layer for Conv1d {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.groups == 0 || !self.cin.is_multiple_of(self.groups) || !self.cout.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{}: groups={} must divide cin={} and cout={}",
                self.name, self.groups, self.cin, self.cout
            )));
        }
        let cin_g = self.cin / self.groups;
        let w = kaiming_uniform(&[self.cout, cin_g, self.k], cin_g * self.k, rng);
        state.add_param(&self.weight_name(), w, self.kind)?;
        if self.bias {
            state.add_param(&self.bias_name(), Tensor::zeros(&[1, self.cout, 1]), ParamKind::Bias)?;
        }
        Ok(())
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = sess.param(&self.weight_name())?;
        let y = sess.tape.conv1d(x, w, self.options())?;
        if self.bias {
            let b = sess.param(&self.bias_name())?;
            return sess.tape.add(y, b);
        }
        Ok(y)
    }
}

/// Batch normalization over `(B, L)` per channel with learnable scale and
/// shift and running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    fn key(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }
}

impl Layer for BatchNorm1d {
    fn register(&self, state: &mut LayerState, _rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.channels;
        state.add_param(&self.key("gamma"), Tensor::full(&[c], 1.0), ParamKind::NormScale)?;
        state.add_param(&self.key("beta"), Tensor::zeros(&[c]), ParamKind::NormShift)?;
        state.add_buffer(&self.key("running_mean"), Tensor::zeros(&[c]))?;
        state.add_buffer(&self.key("running_var"), Tensor::full(&[c], 1.0))?;
        Ok(())
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = sess.param(&self.key("gamma"))?;
        let beta = sess.param(&self.key("beta"))?;
        match sess.mode() {
            Mode::Train => {
                let shape = sess.tape.shape(x);
                let n = shape[0] * shape.get(2).copied().unwrap_or(1);
                let (y, stats) = sess.tape.batch_norm(x, gamma, beta, NormStats::Batch, BN_EPS)?;
                let (mean, var) = stats.expect("batch statistics in train mode");
                let unbias = n as f64 / (n as f64 - 1.0);
                let rm = sess.buffer_mut(&self.key("running_mean"))?;
                for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = sess.buffer_mut(&self.key("running_var"))?;
                for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = sess.buffer(&self.key("running_mean"))?.data().to_vec();
                let var = sess.buffer(&self.key("running_var"))?.data().to_vec();
                let stats = NormStats::Fixed { mean: &mean, var: &var };
                Ok(sess.tape.batch_norm(x, gamma, beta, stats, BN_EPS)?.0)
            }
        }
    }
}

/// Fully connected layer on `[B, in]` with a bias, initialized
/// `U(±1/sqrt(in))` for the weight and zero for the bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Self {
            name: name.into(),
            fin,
            fout,
        }
    }
}

impl Layer for Linear {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (self.fin as f64).sqrt();
        state.add_param(
            &format!("{}.weight", self.name),
            uniform(&[self.fin, self.fout], bound, rng),
            ParamKind::LinearWeight,
        )?;
        state.add_param(
            &format!("{}.bias", self.name),
            Tensor::zeros(&[1, self.fout]),
            ParamKind::Bias,
        )
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = sess.param(&format!("{}.weight", self.name))?;
        let b = sess.param(&format!("{}.bias", self.name))?;
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add(y, b)
    }
}

/// Depthwise convolution (one kernel per channel) followed by a pointwise
/// projection, both without bias.
#[derive(Debug, Clone)]
pub struct DepthwiseSeparable {
    pub depthwise: Conv1d,
    pub pointwise: Conv1d,
}

impl DepthwiseSeparable {
    pub fn new(name: &str, channels: usize, cout: usize, k: usize, dilation: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {k} must be odd")));
        }
        Ok(Self {
            depthwise: Conv1d::new(format!("{name}.dw"), channels, channels, k)
                .dilation(dilation)
                .groups(channels),
            pointwise: Conv1d::pointwise(format!("{name}.pw"), channels, cout),
        })
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.cin * self.depthwise.k + self.pointwise.cin * self.pointwise.cout
    }
}

impl Layer for DepthwiseSeparable {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        self.depthwise.register(state, rng)?;
        self.pointwise.register(state, rng)
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(sess, x)?;
        self.pointwise.forward(sess, h)
    }
}

/// Structured dropout zeroing contiguous runs of `block_size` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropBlock1d {
    pub rate: f64,
    pub block_size: usize,
}

impl DropBlock1d {
    pub fn new(rate: f64, block_size: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropblock rate {rate} outside [0, 1)")));
        }
        if block_size == 0 {
            return Err(Error::Config("dropblock block size must be >= 1".into()));
        }
        Ok(Self { rate, block_size })
    }

    /// Per-position probability of starting a block so that the expected
    /// dropped fraction of a length-`len` row is close to `rate`.
    pub fn gamma(&self, len: usize) -> f64 {
        let bs = self.block_size as f64;
        self.rate * len as f64 / (bs * (len - self.block_size + 1) as f64)
    }
}

/// Keep-mask for DropBlock over `rows` rows of length `len`, already scaled
/// by `len / kept` per row. Block starts are drawn in `[0, len - block)` so
/// every dropped run is a whole block or a union of blocks.
pub fn dropblock_mask(rows: usize, len: usize, block: &DropBlock1d, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if block.block_size > len {
        return Err(Error::Config(format!(
            "dropblock block size {} exceeds length {len}",
            block.block_size
        )));
    }
    let gamma = block.gamma(len);
    let starts = len - block.block_size + 1;
    let mut mask = vec![1.0; rows * len];
    for row in mask.chunks_exact_mut(len) {
        for s in 0..starts {
            if rng.random::<f64>() < gamma {
                row[s..s + block.block_size].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let kept = row.iter().filter(|&&v| v != 0.0).count();
        let scale = if kept == 0 { 0.0 } else { len as f64 / kept as f64 };
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(mask)
}

impl DropBlock1d {
    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("input rank", "dropblock expects [B, C, L]"));
        }
        let len = shape[2];
        if self.block_size > len {
            return Err(Error::Config(format!(
                "dropblock block size {} exceeds length {len}",
                self.block_size
            )));
        }
        if sess.mode() == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let rng = sess
            .rng()
            .ok_or_else(|| Error::Contract("dropblock in train mode needs an rng".into()))?;
        let mask = dropblock_mask(shape[0] * shape[1], len, self, rng)?;
        let m = sess.tape.constant(Tensor::new(&shape, mask)?);
        sess.tape.mul(x, m)
    }
}

/// Channel gate from average- and max-pooled descriptors passed through a
/// shared two-layer bottleneck.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        let name = name.into();
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "{name}: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(Self {
            name,
            channels,
            reduction,
        })
    }

    fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden()
    }

    fn squeeze(&self) -> Conv1d {
        Conv1d::pointwise(format!("{}.fc1", self.name), self.channels, self.hidden()).kind(ParamKind::AttentionKernel)
    }

    fn excite(&self) -> Conv1d {
        Conv1d::pointwise(format!("{}.fc2", self.name), self.hidden(), self.channels).kind(ParamKind::AttentionKernel)
    }
}

impl Layer for ChannelAttention {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        self.squeeze().register(state, rng)?;
        self.excite().register(state, rng)
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let (fc1, fc2) = (self.squeeze(), self.excite());
        let avg = sess.tape.mean_axis(x, 2)?;
        let max = sess.tape.max_axis(x, 2)?;
        let mlp = |sess: &mut Session<'_>, p: Var| -> Result<Var> {
            let h = fc1.forward(sess, p)?;
            let h = sess.tape.relu(h);
            fc2.forward(sess, h)
        };
        let a = mlp(sess, avg)?;
        let m = mlp(sess, max)?;
        let logits = sess.tape.add(a, m)?;
        let gate = sess.tape.sigmoid(logits);
        sess.tape.mul(x, gate)
    }
}

/// Temporal gate from the channel-wise mean and max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub name: String,
    pub k: usize,
}

impl SpatialAttention {
    pub fn new(name: impl Into<String>, k: usize) -> Result<Self> {
        let name = name.into();
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {k} must be odd")));
        }
        Ok(Self { name, k })
    }

    pub fn param_count(&self) -> usize {
        2 * self.k
    }

    fn conv(&self) -> Conv1d {
        Conv1d::new(format!("{}.conv", self.name), 2, 1, self.k).kind(ParamKind::AttentionKernel)
    }
}

impl Layer for SpatialAttention {
    fn register(&self, state: &mut LayerState, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv().register(state, rng)
    }

    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let mean = sess.tape.mean_axis(x, 1)?;
        let max = sess.tape.max_axis(x, 1)?;
        let maps = sess.tape.concat(&[mean, max], 1)?;
        let logits = self.conv().forward(sess, maps)?;
        let gate = sess.tape.sigmoid(logits);
        sess.tape.mul(x, gate)
    }
}

/// `[B, C, L] -> [B, C]` mean over time.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("input rank", "global average pool expects [B, C, L]"));
    }
    let m = tape.mean_axis(x, 2)?;
    tape.reshape(m, &shape[..2])
}
