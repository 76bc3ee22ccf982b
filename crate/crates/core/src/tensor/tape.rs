use std::hash::Hasher;

use super::conv::{self, ConvGeometry};
use super::{Conv1dOptions, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        input: Var,
        dims: AxisDims,
    },
    MaxAxis {
        input: Var,
        dims: AxisDims,
        argmax: Vec<usize>,
    },
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Concat {
        inputs: Vec<Var>,
        axis_sizes: Vec<usize>,
        dims: AxisDims,
    },
    Reshape(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        dims: AxisDims,
    },
}

/// A tensor viewed as `[outer, axis, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisDims {
    outer: usize,
    axis: usize,
    inner: usize,
}

impl AxisDims {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            axis: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// Per-channel batch mean and biased variance.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// How batch normalization obtains its per-channel statistics.
#[derive(Debug, Clone)]
pub enum NormStats<'a> {
    /// Normalize with statistics of the current batch (train mode).
    Batch,
    /// Normalize with fixed mean and variance (eval mode).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of every operation applied during one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede the
/// nodes that consume them; [`Tape::backward`] visits each node once, in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    branch_hash: Option<std::collections::hash_map::DefaultHasher>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the outcome of every data-dependent branch (relu activity,
    /// max positions) into a hash readable through [`Tape::branch_signature`].
    /// Gradient checks use it to reject finite differences that straddle a
    /// non-differentiable point.
    pub fn track_branches(&mut self) {
        self.branch_hash = Some(Default::default());
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branch_hash.as_ref().map(|h| h.finish())
    }

    /// Feeds an externally computed branch decision into the signature.
    pub fn note_branches(&mut self, pattern: impl IntoIterator<Item = bool>) {
        if let Some(h) = self.branch_hash.as_mut() {
            for b in pattern {
                h.write_u8(b as u8);
            }
        }
    }

    fn note_indices(&mut self, idx: &[usize]) {
        if let Some(h) = self.branch_hash.as_mut() {
            for &i in idx {
                h.write_usize(i);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] fills its gradient.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut value = Tensor::new(shape, data).expect("op output shape");
        value.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(value, op)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![0.0; bc.numel()];
        bc.for_each(|o, ia, ib| out[o] = f(xa[ia], xb[ib]));
        let shape = bc.out.clone();
        Ok(self.push_result(&shape, out, op, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(&shape, out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(&shape, out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        if self.branch_hash.is_some() {
            let pattern: Vec<bool> = self.data(a).iter().map(|&x| x > 0.0).collect();
            self.note_branches(pattern);
        }
        let shape = self.shape(a).to_vec();
        self.push_result(&shape, out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(&shape, out, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| softplus(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(&shape, out, Op::Softplus(a), &[a])
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push_result(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push_result(&[1], vec![m], Op::Mean(a), &[a])
    }

    /// Mean over one axis, keeping it as a singleton.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let dims = AxisDims::of(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; dims.outer * dims.inner];
        for o in 0..dims.outer {
            for j in 0..dims.axis {
                let row = &x[(o * dims.axis + j) * dims.inner..][..dims.inner];
                let acc = &mut out[o * dims.inner..][..dims.inner];
                acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
        let n = dims.axis as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push_result(&out_shape, out, Op::MeanAxis { input: a, dims }, &[a]))
    }

    /// Max over one axis, keeping it as a singleton. The gradient flows to
    /// the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let dims = AxisDims::of(&shape, axis);
        let x = self.data(a);
        let mut out = vec![f64::NEG_INFINITY; dims.outer * dims.inner];
        let mut argmax = vec![0usize; dims.outer * dims.inner];
        for o in 0..dims.outer {
            for j in 0..dims.axis {
                let row = &x[(o * dims.axis + j) * dims.inner..][..dims.inner];
                for (i, &v) in row.iter().enumerate() {
                    let slot = o * dims.inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = j;
                    }
                }
            }
        }
        self.note_indices(&argmax);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push_result(&out_shape, out, Op::MaxAxis { input: a, dims, argmax }, &[a]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(
                "rank",
                format!("matmul expects 2D operands, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::dim(
                "axis 0 of right operand",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        conv::gemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            (k, 1),
            self.data(b),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        Ok(self.push_result(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, opts: Conv1dOptions) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), &opts)?;
        let out = conv::forward(&geom, self.data(input), self.data(kernel));
        Ok(self.push_result(
            &[geom.batch, geom.cout, geom.len_out],
            out,
            Op::Conv1d { input, kernel, geom },
            &[input, kernel],
        ))
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut axis_sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(
                    format!("axis other than {axis}"),
                    format!("cannot concatenate {s:?} with {base:?}"),
                ));
            }
            axis_sizes.push(s[axis]);
        }
        let total: usize = axis_sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let dims = AxisDims::of(&out_shape, axis);
        let mut out = vec![0.0; dims.outer * total * dims.inner];
        let mut offset = 0;
        for (&v, &size) in inputs.iter().zip(&axis_sizes) {
            let x = self.data(v);
            let chunk = size * dims.inner;
            for o in 0..dims.outer {
                out[(o * total + offset) * dims.inner..][..chunk].copy_from_slice(&x[o * chunk..][..chunk]);
            }
            offset += size;
        }
        Ok(self.push_result(
            &out_shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis_sizes,
                dims,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push_result(shape, t.into_data(), Op::Reshape(a), &[a]))
    }

    /// Per-channel normalization of `[B, C, L]` followed by the affine map
    /// `gamma · x̂ + beta`. With [`NormStats::Batch`] the statistics
    /// (biased variance) are returned so callers can update running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(
                "input rank",
                format!("batch norm expects [B, C, L], got {shape:?}"),
            ));
        }
        let dims = AxisDims::of(&shape, 1);
        let c = dims.axis;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::dim(name, format!("expected {c} channels")));
            }
        }
        let n = dims.outer * dims.inner;
        let xs = self.data(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::BatchSize(n));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..dims.outer {
                        s += xs[(o * c + ch) * dims.inner..][..dims.inner].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut q = 0.0;
                    for o in 0..dims.outer {
                        q += xs[(o * c + ch) * dims.inner..][..dims.inner]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / n as f64;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("running stats", format!("expected {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for o in 0..dims.outer {
            for ch in 0..c {
                let off = (o * c + ch) * dims.inner;
                for i in off..off + dims.inner {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let v = self.push_result(
            &shape,
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                dims,
            },
            &[x, gamma, beta],
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    // ---- backward ----------------------------------------------------

    /// Propagates `d output / d leaf` into every leaf that requires a
    /// gradient. May be called once per tape.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::Contract(
                "output does not depend on any leaf that requires a gradient".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[output.0].value.grad = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            for (v, dv) in contributions {
                let slot = &mut self.nodes[v.0].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("forward checked");
                let mut ga = wants(*a).then(|| vec![0.0; self.value(*a).numel()]);
                let mut gb = wants(*b).then(|| vec![0.0; self.value(*b).numel()]);
                bc.for_each(|o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += sign * g[o];
                    }
                });
                out.extend(ga.map(|d| (*a, d)));
                out.extend(gb.map(|d| (*b, d)));
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("forward checked");
                let (xa, xb) = (self.data(*a), self.data(*b));
                let mut ga = wants(*a).then(|| vec![0.0; xa.len()]);
                let mut gb = wants(*b).then(|| vec![0.0; xb.len()]);
                bc.for_each(|o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * xb[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * xa[ia];
                    }
                });
                out.extend(ga.map(|d| (*a, d)));
                out.extend(gb.map(|d| (*b, d)));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Relu(a) => {
                let x = self.data(*a);
                out.push((
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                out.push((*a, g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect()));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::MeanAxis { input, dims } => {
                let mut dx = vec![0.0; dims.outer * dims.axis * dims.inner];
                let scale = 1.0 / dims.axis as f64;
                for o in 0..dims.outer {
                    let src = &g[o * dims.inner..][..dims.inner];
                    for j in 0..dims.axis {
                        let dst = &mut dx[(o * dims.axis + j) * dims.inner..][..dims.inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                    }
                }
                out.push((*input, dx));
            }
            Op::MaxAxis { input, dims, argmax } => {
                let mut dx = vec![0.0; dims.outer * dims.axis * dims.inner];
                for o in 0..dims.outer {
                    for i in 0..dims.inner {
                        let slot = o * dims.inner + i;
                        dx[(o * dims.axis + argmax[slot]) * dims.inner + i] += g[slot];
                    }
                }
                out.push((*input, dx));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    conv::gemm(m, n, k, 1.0, g, (n, 1), self.data(*b), (1, n), 0.0, &mut da, (k, 1));
                    out.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    conv::gemm(k, m, n, 1.0, self.data(*a), (1, k), g, (n, 1), 0.0, &mut db, (n, 1));
                    out.push((*b, db));
                }
            }
            Op::Conv1d { input, kernel, geom } => {
                let (dx, dw) = conv::backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*kernel, d)));
            }
            Op::Concat {
                inputs,
                axis_sizes,
                dims,
            } => {
                let total = dims.axis;
                let mut offset = 0;
                for (&v, &size) in inputs.iter().zip(axis_sizes) {
                    if wants(v) {
                        let chunk = size * dims.inner;
                        let mut dx = vec![0.0; dims.outer * chunk];
                        for o in 0..dims.outer {
                            dx[o * chunk..][..chunk].copy_from_slice(&g[(o * total + offset) * dims.inner..][..chunk]);
                        }
                        out.push((v, dx));
                    }
                    offset += size;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                dims,
            } => {
                let c = dims.axis;
                let n = (dims.outer * dims.inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..dims.outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * dims.inner;
                        for i in off..off + dims.inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(*input) {
                    let gam = self.data(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..dims.outer {
                        for ch in 0..c {
                            let off = (o * c + ch) * dims.inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + dims.inner {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if wants(*beta) {
                    out.push((*beta, sum_g));
                }
            }
        }
        out
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(
            format!("axis {axis}"),
            format!("out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Index mapping for same-rank broadcasting where each axis either matches
/// or is a singleton on one side.
struct Broadcast {
    out: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim(
                "rank",
                format!("cannot broadcast {a:?} with {b:?}: ranks differ"),
            ));
        }
        let mut out = Vec::with_capacity(a.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::dim(
                        format!("axis {i}"),
                        format!("cannot broadcast {a:?} with {b:?}"),
                    ))
                }
            });
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for i in (0..s.len()).rev() {
                st[i] = if s[i] == 1 && out[i] != 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Ok(Self {
            stride_a: strides(a),
            stride_b: strides(b),
            same: a == b,
            out,
        })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out.len();
        let last = self.out[rank - 1];
        let (sa_last, sb_last) = (self.stride_a[rank - 1], self.stride_b[rank - 1]);
        let mut idx = vec![0usize; rank - 1];
        let mut o = 0;
        while o < n {
            let (mut ia, mut ib) = (0, 0);
            for (d, &i) in idx.iter().enumerate() {
                ia += i * self.stride_a[d];
                ib += i * self.stride_b[d];
            }
            for t in 0..last {
                f(o + t, ia + t * sa_last, ib + t * sb_last);
            }
            o += last;
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
        let w = tape.constant(t(&[1, 1, 1], &[1.]));
        let y = tape.conv1d(x, w, Conv1dOptions::default()).unwrap();
        assert_eq!(tape.data(y), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn conv_dilated_valid() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
        let w = tape.constant(t(&[1, 1, 2], &[1., 1.]));
        let y = tape.conv1d(x, w, Conv1dOptions::dilated(2).valid()).unwrap();
        assert_eq!(tape.data(y), &[4., 6., 8.]);
    }

    #[test]
    fn conv_grouped_same_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4], 1.0));
        let w = tape.constant(Tensor::full(&[2, 1, 3], 1.0));
        let y = tape.conv1d(x, w, Conv1dOptions::grouped(2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4]);
        assert_eq!(tape.data(y), &[2., 3., 3., 2., 2., 3., 3., 2.]);
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3]));
        match tape.conv1d(x, w, Conv1dOptions::default()) {
            Err(Error::Dimension { axis, .. }) => assert!(axis.contains("axis 1")),
            other => panic!("unexpected {other:?}"),
        }
        let w = tape.constant(Tensor::zeros(&[2, 1, 3]));
        assert!(matches!(
            tape.conv1d(x, w, Conv1dOptions::grouped(2)),
            Err(Error::Config(_))
        ));
        let _ = Padding::Valid;
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1., 0., 2.]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0., 0., 2.]);
        let y = tape.constant(Tensor::from_vec(vec![1., 2., 3., 4.]));
        let m = tape.mean(y);
        assert_eq!(tape.data(m), &[2.5]);
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 1], 1.0));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(p), &[2, 1]);
        assert_eq!(tape.data(p), &[3., 3.]);
    }

    #[test]
    fn broadcast_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 2.0));
        let g = tape.constant(t(&[2, 3, 1], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.mul(x, g).unwrap();
        assert_eq!(tape.data(y)[..5], [2., 2., 2., 2., 4.]);
        let bad = tape.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
        let bad_rank = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(tape.add(x, bad_rank).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_mean_relu() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1., 1.]));
        let r = tape.relu(x);
        let m = tape.mean(r);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn max_routes_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 4, 1], &[1., 3., 3., 2.]));
        let m = tape.max_axis(x, 1).unwrap();
        assert_eq!(tape.data(m), &[3.]);
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1., 2.]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x + x*x) → dy/dx = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.5, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(x, sq).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -3.0]);
    }

    #[test]
    fn concat_and_split_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1, 1, 2], &[1., 2.]));
        let b = tape.param(t(&[1, 2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        assert_eq!(tape.data(c), &[1., 2., 3., 4., 5., 6.]);
        let w = tape.constant(t(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1., 2.]);
        assert_eq!(tape.grad(b).unwrap(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn batch_norm_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1]));
        let g = tape.param(Tensor::full(&[2], 1.0));
        let b = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batch_norm(x, g, b, NormStats::Batch, 1e-5),
            Err(Error::BatchSize(1))
        ));
    }
}
