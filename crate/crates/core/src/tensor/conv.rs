//! 1D cross-correlation kernels (grouped, strided, dilated) and the dense
//! matrix product they reduce to.
//!
//! Layout: input `[B, Cin, L]`, kernel `[Cout, Cin/groups, K]`, output
//! `[B, Cout, L']`, all row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zero padding so that `L' = ceil(L / stride)`; the extra element goes
    /// on the right when the total is odd.
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for Conv1dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv1dOptions {
    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            ..Self::default()
        }
    }

    pub fn grouped(groups: usize) -> Self {
        Self {
            groups,
            ..Self::default()
        }
    }

    pub fn valid(mut self) -> Self {
        self.padding = Padding::Valid;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], opts: &Conv1dOptions) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(
                "input rank",
                format!("conv1d expects [B, Cin, L], got {input:?}"),
            ));
        }
        if kernel.len() != 3 {
            return Err(Error::dim(
                "kernel rank",
                format!("conv1d expects [Cout, Cin/groups, K], got {kernel:?}"),
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Config("stride and dilation must be >= 1".into()));
        }
        let (batch, cin, len_in) = (input[0], input[1], input[2]);
        let (cout, cin_per_group, k) = (kernel[0], kernel[1], kernel[2]);
        let groups = opts.groups;
        if groups == 0 || cin % groups != 0 {
            return Err(Error::Config(format!("groups={groups} does not divide Cin={cin}")));
        }
        if cout % groups != 0 {
            return Err(Error::Config(format!("groups={groups} does not divide Cout={cout}")));
        }
        if cin_per_group != cin / groups {
            return Err(Error::dim(
                "kernel axis 1",
                format!(
                    "kernel expects {cin_per_group} input channels per group, input provides {}",
                    cin / groups
                ),
            ));
        }
        let span = (k - 1) * opts.dilation + 1;
        let (len_out, pad_left) = match opts.padding {
            Padding::Same => {
                let len_out = len_in.div_ceil(opts.stride);
                let needed = (len_out - 1) * opts.stride + span;
                let total = needed.saturating_sub(len_in);
                (len_out, total / 2)
            }
            Padding::Valid => {
                if len_in < span {
                    return Err(Error::dim(
                        "input axis 2",
                        format!("length {len_in} shorter than dilated kernel span {span}"),
                    ));
                }
                ((len_in - span) / opts.stride + 1, 0)
            }
        };
        Ok(Self {
            batch,
            cin,
            cout,
            len_in,
            len_out,
            k,
            stride: opts.stride,
            dilation: opts.dilation,
            groups,
            pad_left,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_left == 0 && self.len_in == self.len_out
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Input position read by output `t` through tap `j`, if inside the signal.
    #[cfg(test)]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t * self.stride + j * self.dilation) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }

    /// Range of outputs `t` whose tap `j` lands inside the signal.
    fn valid_outputs(&self, j: usize) -> std::ops::Range<usize> {
        let offset = (j * self.dilation) as isize - self.pad_left as isize;
        let s = self.stride as isize;
        // smallest t with t*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // largest t with t*s + offset <= len_in - 1
        let last = self.len_in as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = (lo as usize).min(self.len_out);
        let hi = (hi as usize).min(self.len_out);
        lo..hi.max(lo)
    }

    fn fill_col(&self, x: &[f64], col: &mut [f64]) {
        let kk = self.k;
        let lo = self.len_out;
        for ci in 0..self.cin_g() {
            let row = &x[ci * self.len_in..(ci + 1) * self.len_in];
            for j in 0..kk {
                let dst = &mut col[(ci * kk + j) * lo..(ci * kk + j + 1) * lo];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for t in self.valid_outputs(j) {
                    dst[t] = row[(t * self.stride + j * self.dilation) - self.pad_left];
                }
            }
        }
    }

    fn scatter_col(&self, col: &[f64], dx: &mut [f64]) {
        let kk = self.k;
        let lo = self.len_out;
        for ci in 0..self.cin_g() {
            let row = &mut dx[ci * self.len_in..(ci + 1) * self.len_in];
            for j in 0..kk {
                let src = &col[(ci * kk + j) * lo..(ci * kk + j + 1) * lo];
                for t in self.valid_outputs(j) {
                    row[(t * self.stride + j * self.dilation) - self.pad_left] += src[t];
                }
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: a too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: b too short");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: c too short");
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k);
    let mut out = vec![0.0; g.batch * g.cout * g.len_out];
    let mut col = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![0.0; cin_g * kk * g.len_out]
    };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.cin + grp * cin_g) * g.len_in..][..cin_g * g.len_in];
            let ws = &w[grp * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
            let os = &mut out[(b * g.cout + grp * cout_g) * g.len_out..][..cout_g * g.len_out];
            if g.is_depthwise() {
                for j in 0..kk {
                    let wj = ws[j];
                    let range = g.valid_outputs(j);
                    if range.is_empty() {
                        continue;
                    }
                    if g.stride == 1 {
                        let src = &xs[range.start + j * g.dilation - g.pad_left..][..range.len()];
                        for (o, v) in os[range].iter_mut().zip(src) {
                            *o += wj * v;
                        }
                    } else {
                        for t in range {
                            os[t] += wj * xs[t * g.stride + j * g.dilation - g.pad_left];
                        }
                    }
                }
            } else {
                let src: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    g.fill_col(xs, &mut col);
                    &col
                };
                gemm(
                    cout_g,
                    cin_g * kk,
                    g.len_out,
                    1.0,
                    ws,
                    (cin_g * kk, 1),
                    src,
                    (g.len_out, 1),
                    0.0,
                    os,
                    (g.len_out, 1),
                );
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut col = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![0.0; cin_g * kk * g.len_out]
    };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (b * g.cin + grp * cin_g) * g.len_in;
            let xs = &x[x_off..][..cin_g * g.len_in];
            let w_off = grp * cout_g * cin_g * kk;
            let ws = &w[w_off..][..cout_g * cin_g * kk];
            let dys = &dy[(b * g.cout + grp * cout_g) * g.len_out..][..cout_g * g.len_out];
            if g.is_depthwise() {
                for j in 0..kk {
                    let range = g.valid_outputs(j);
                    let base = j * g.dilation;
                    if range.is_empty() {
                        continue;
                    }
                    if g.stride == 1 {
                        let at = range.start + base - g.pad_left;
                        let d = &dys[range.clone()];
                        if let Some(dw) = dw.as_mut() {
                            dw[w_off + j] += d.iter().zip(&xs[at..][..d.len()]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wj = ws[j];
                            for (o, v) in dx[x_off + at..][..d.len()].iter_mut().zip(d) {
                                *o += wj * v;
                            }
                        }
                        continue;
                    }
                    if let Some(dw) = dw.as_mut() {
                        let mut acc = 0.0;
                        for t in range.clone() {
                            acc += dys[t] * xs[t * g.stride + base - g.pad_left];
                        }
                        dw[w_off + j] += acc;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[x_off..][..g.len_in];
                        let wj = ws[j];
                        for t in range {
                            dxs[t * g.stride + base - g.pad_left] += wj * dys[t];
                        }
                    }
                }
                continue;
            }
            if !g.is_pointwise() {
                g.fill_col(xs, &mut col);
            }
            if let Some(dw) = dw.as_mut() {
                let src: &[f64] = if g.is_pointwise() { xs } else { &col };
                // dW[o, r] += Σ_t dy[o, t] · col[r, t]
                gemm(
                    cout_g,
                    g.len_out,
                    cin_g * kk,
                    1.0,
                    dys,
                    (g.len_out, 1),
                    src,
                    (1, g.len_out),
                    1.0,
                    &mut dw[w_off..][..cout_g * cin_g * kk],
                    (cin_g * kk, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[x_off..][..cin_g * g.len_in];
                if g.is_pointwise() {
                    gemm(
                        cin_g,
                        cout_g,
                        g.len_out,
                        1.0,
                        ws,
                        (1, cin_g),
                        dys,
                        (g.len_out, 1),
                        1.0,
                        dxs,
                        (g.len_in, 1),
                    );
                } else {
                    gemm(
                        cin_g * kk,
                        cout_g,
                        g.len_out,
                        1.0,
                        ws,
                        (1, cin_g * kk),
                        dys,
                        (g.len_out, 1),
                        0.0,
                        &mut col,
                        (g.len_out, 1),
                    );
                    g.scatter_col(&col, dxs);
                }
            }
        }
    }
    (dx, dw)
}
