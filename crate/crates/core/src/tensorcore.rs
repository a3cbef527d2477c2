//! Dense `f32` tensors and the closed set of forward/backward kernels the
//! detector needs.
//!
//! Convolution kernels work on single samples laid out `[C, H, W]`; callers
//! lift them over a leading batch dimension. Convolutions are lowered to
//! im2col + GEMM (`matrixmultiply`), which keeps every output element's
//! reduction order fixed, so results are bitwise reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch(format!("add {:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `[B, C, H, W]` dimensions, or an error naming `what`.
    pub fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(mismatch(format!("{what}: expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(mismatch(format!("{what}: expected 3-d tensor, got {:?}", self.shape))),
        }
    }

    /// Copy of sample `i` along the leading axis.
    pub fn sample(&self, i: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| mismatch("stack of nothing"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(mismatch(format!("stack {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }
}

// ---------------------------------------------------------------------------
// GEMM

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, where
/// `a` and/or `b` may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a 2-D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(pad: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad,
            dilation,
        }
    }

    /// Output extent of a convolution over `input` with kernel extent `k`.
    pub fn conv_out(&self, input: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(mismatch("stride and dilation must be at least 1"));
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        if span > padded {
            return Err(mismatch(format!("kernel span {span} exceeds padded input {padded}")));
        }
        let room = padded - span;
        if !room.is_multiple_of(self.stride) {
            return Err(mismatch(format!(
                "non-integral output size: ({padded} - {span}) / {}",
                self.stride
            )));
        }
        Ok(room / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn deconv_out(&self, input: usize, k: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.dilation * (k - 1) + 1;
        if full < 2 * self.pad + 1 {
            return Err(mismatch("padding removes the whole output"));
        }
        Ok(full - 2 * self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut Vec<f32>) {
    let ncol = g.col_cols();
    col.clear();
    col.resize(g.col_rows() * ncol, 0.0);
    let (s, p, d) = (g.spec.stride as isize, g.spec.pad as isize, g.spec.dilation as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = kj as isize * d - p;
                    if s == 1 {
                        // contiguous run of valid columns
                        let lo = (-x0).max(0) as usize;
                        let hi = ((g.w as isize - x0).min(g.ow as isize)).max(0) as usize;
                        if lo < hi {
                            let a = (lo as isize + x0) as usize;
                            drow[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + x0;
                            if ix >= 0 && ix < g.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an image (adjoint of [`im2col`]).
fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let ncol = g.col_cols();
    let (s, p, d) = (g.spec.stride as isize, g.spec.pad as isize, g.spec.dilation as isize);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = kj as isize * d - p;
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = ox as isize * s + x0;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &[usize], kernel: &[usize], spec: ConvSpec, transposed: bool) -> Result<(ConvGeom, usize)> {
    let [c, h, w] = input[..] else {
        return Err(mismatch(format!("conv input must be [C,H,W], got {input:?}")));
    };
    let [kn, kc, kh, kw] = kernel[..] else {
        return Err(mismatch(format!("kernel must be 4-d, got {kernel:?}")));
    };
    if !transposed {
        if kc != c {
            return Err(mismatch(format!("kernel expects {kc} input channels, input has {c}")));
        }
        let oh = spec.conv_out(h, kh)?;
        let ow = spec.conv_out(w, kw)?;
        Ok((ConvGeom { c, h, w, kh, kw, oh, ow, spec }, kn))
    } else {
        // For the transposed op the "image" side is the output.
        if kn != c {
            return Err(mismatch(format!("deconv kernel expects {kn} input channels, input has {c}")));
        }
        let oh = spec.deconv_out(h, kh)?;
        let ow = spec.deconv_out(w, kw)?;
        let g = ConvGeom { c: kc, h: oh, w: ow, kh, kw, oh: h, ow: w, spec };
        // sanity: the forward conv over the output recovers the input size
        if spec.conv_out(oh, kh)? != h || spec.conv_out(ow, kw)? != w {
            return Err(mismatch("deconv geometry is not invertible"));
        }
        Ok((g, kc))
    }
}

/// Reusable scratch for the im2col buffers.
#[derive(Debug, Default)]
pub struct Workspace {
    col: Vec<f32>,
    dcol: Vec<f32>,
}

/// Cross-correlation of one `[C,H,W]` sample with `[N,C,kh,kw]` kernels.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (g, n) = conv_geom(input.shape(), kernel.shape(), spec, false)?;
    check_bias(bias, n)?;
    let mut out = Tensor::zeros(&[n, g.oh, g.ow]);
    conv_forward_raw(input.data(), &g, n, kernel.data(), bias.data(), out.data_mut(), &mut Workspace::default());
    Ok(out)
}

fn check_bias(bias: &Tensor, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(mismatch(format!("bias must be [{n}], got {:?}", bias.shape())));
    }
    Ok(())
}

fn conv_forward_raw(x: &[f32], g: &ConvGeom, n: usize, k: &[f32], bias: &[f32], out: &mut [f32], ws: &mut Workspace) {
    let ncol = g.col_cols();
    for (o, &b) in bias.iter().enumerate() {
        out[o * ncol..(o + 1) * ncol].fill(b);
    }
    if g.is_pointwise() {
        gemm(n, g.c, ncol, k, false, x, false, 1.0, out);
    } else {
        im2col(x, g, &mut ws.col);
        gemm(n, g.col_rows(), ncol, k, false, &ws.col, false, 1.0, out);
    }
}

/// Gradients of a convolution w.r.t. its input, kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
) -> Result<ConvGrads> {
    let (g, n) = conv_geom(input.shape(), kernel.shape(), spec, false)?;
    if grad_out.shape() != [n, g.oh, g.ow] {
        return Err(mismatch(format!(
            "upstream gradient {:?} does not match conv output [{n}, {}, {}]",
            grad_out.shape(),
            g.oh,
            g.ow
        )));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[n]);
    conv_backward_raw(
        input.data(),
        &g,
        n,
        kernel.data(),
        grad_out.data(),
        Some(gi.data_mut()),
        gk.data_mut(),
        gb.data_mut(),
        &mut Workspace::default(),
    );
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

/// Accumulates kernel/bias gradients and, if requested, writes the input
/// gradient (overwriting).
#[allow(clippy::too_many_arguments)]
fn conv_backward_raw(
    x: &[f32],
    g: &ConvGeom,
    n: usize,
    k: &[f32],
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dk: &mut [f32],
    db: &mut [f32],
    ws: &mut Workspace,
) {
    let ncol = g.col_cols();
    for (o, acc) in db.iter_mut().enumerate() {
        *acc += dy[o * ncol..(o + 1) * ncol].iter().sum::<f32>();
    }
    let rows = g.col_rows();
    if g.is_pointwise() {
        gemm(n, ncol, rows, dy, false, x, true, 1.0, dk);
        if let Some(dx) = dx {
            gemm(rows, n, ncol, k, true, dy, false, 0.0, dx);
        }
        return;
    }
    im2col(x, g, &mut ws.col);
    gemm(n, ncol, rows, dy, false, &ws.col, true, 1.0, dk);
    if let Some(dx) = dx {
        ws.dcol.clear();
        ws.dcol.resize(rows * ncol, 0.0);
        gemm(rows, n, ncol, k, true, dy, false, 0.0, &mut ws.dcol);
        dx.fill(0.0);
        col2im(&ws.dcol, g, dx);
    }
}

/// Transposed convolution of one `[N,H,W]` sample with kernels laid out
/// `[N, C, kh, kw]` (the layout of the convolution it is the adjoint of).
pub fn deconv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (g, c) = conv_geom(input.shape(), kernel.shape(), spec, true)?;
    check_bias(bias, c)?;
    let mut out = Tensor::zeros(&[c, g.h, g.w]);
    deconv_forward_raw(input.data(), &g, kernel.shape()[0], kernel.data(), bias.data(), out.data_mut(), &mut Workspace::default());
    Ok(out)
}

fn deconv_forward_raw(y: &[f32], g: &ConvGeom, n: usize, k: &[f32], bias: &[f32], out: &mut [f32], ws: &mut Workspace) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let plane = g.h * g.w;
    if g.is_pointwise() {
        gemm(rows, n, ncol, k, true, y, false, 0.0, out);
    } else {
        ws.col.clear();
        ws.col.resize(rows * ncol, 0.0);
        gemm(rows, n, ncol, k, true, y, false, 0.0, &mut ws.col);
        out.fill(0.0);
        col2im(&ws.col, g, out);
    }
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

pub fn deconv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
) -> Result<ConvGrads> {
    let (g, c) = conv_geom(input.shape(), kernel.shape(), spec, true)?;
    if grad_out.shape() != [c, g.h, g.w] {
        return Err(mismatch(format!(
            "upstream gradient {:?} does not match deconv output [{c}, {}, {}]",
            grad_out.shape(),
            g.h,
            g.w
        )));
    }
    let n = kernel.shape()[0];
    let mut gi = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[c]);
    deconv_backward_raw(
        input.data(),
        &g,
        n,
        kernel.data(),
        grad_out.data(),
        Some(gi.data_mut()),
        gk.data_mut(),
        gb.data_mut(),
        &mut Workspace::default(),
    );
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

#[allow(clippy::too_many_arguments)]
fn deconv_backward_raw(
    y: &[f32],
    g: &ConvGeom,
    n: usize,
    k: &[f32],
    dout: &[f32],
    dy: Option<&mut [f32]>,
    dk: &mut [f32],
    db: &mut [f32],
    ws: &mut Workspace,
) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let plane = g.h * g.w;
    for (c, acc) in db.iter_mut().enumerate() {
        *acc += dout[c * plane..(c + 1) * plane].iter().sum::<f32>();
    }
    let dcol: &[f32] = if g.is_pointwise() {
        dout
    } else {
        im2col(dout, g, &mut ws.col);
        &ws.col
    };
    // dK[N, rows] += y[N, ncol] · dcolᵀ
    gemm(n, ncol, rows, y, false, dcol, true, 1.0, dk);
    if let Some(dy) = dy {
        gemm(n, rows, ncol, k, false, dcol, false, 0.0, dy);
    }
}

// ---------------------------------------------------------------------------
// Batched layers. These own their parameters; caches are returned to the caller.

/// Learnable tensor with its gradient and SGD momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub value: Tensor,
    pub gradient: Tensor,
    pub momentum_buffer: Tensor,
}

impl ParamBlock {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            gradient: Tensor::zeros(&shape),
            momentum_buffer: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill(0.0);
    }
}

/// `v ← momentum·v + g + weight_decay·w; w ← w − lr·v; g ← 0`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut ParamBlock>,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for p in params {
        let value = p.value.data.iter_mut();
        let grad = p.gradient.data.iter_mut();
        let vel = p.momentum_buffer.data.iter_mut();
        for ((w, g), v) in value.zip(grad).zip(vel) {
            *v = momentum * *v + *g + weight_decay * *w;
            *w -= lr * *v;
            *g = 0.0;
        }
    }
}

/// Convolution (or transposed convolution) over `[B, C, H, W]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv2d {
    /// `weight` is `[out, in, kh, kw]` for a convolution and `[in, out, kh,
    /// kw]` for a transposed one.
    pub fn new(weight: Tensor, bias: Tensor, spec: ConvSpec, transposed: bool) -> Self {
        Self {
            weight: ParamBlock::new(weight),
            bias: ParamBlock::new(bias),
            spec,
            transposed,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.value.shape()[0]
    }

    fn geom(&self, c: usize, h: usize, w: usize) -> Result<(ConvGeom, usize)> {
        conv_geom(&[c, h, w], self.weight.value.shape(), self.spec, self.transposed)
    }

    pub fn forward(&self, x: &Tensor, ws: &mut Workspace) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4("conv input")?;
        let (g, n) = self.geom(c, h, w)?;
        let (oh, ow) = if self.transposed { (g.h, g.w) } else { (g.oh, g.ow) };
        let mut out = Tensor::zeros(&[b, n, oh, ow]);
        let (in_per, out_per) = (c * h * w, n * oh * ow);
        let k = self.weight.value.data();
        let bias = self.bias.value.data();
        for i in 0..b {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let oi = &mut out.data_mut()[i * out_per..(i + 1) * out_per];
            if self.transposed {
                deconv_forward_raw(xi, &g, c, k, bias, oi, ws);
            } else {
                conv_forward_raw(xi, &g, n, k, bias, oi, ws);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for the forward pass over `x`;
    /// returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool, ws: &mut Workspace) -> Result<Option<Tensor>> {
        let (b, c, h, w) = x.dims4("conv input")?;
        let (g, n) = self.geom(c, h, w)?;
        let (oh, ow) = if self.transposed { (g.h, g.w) } else { (g.oh, g.ow) };
        if dy.shape() != [b, n, oh, ow] {
            return Err(mismatch(format!(
                "conv upstream gradient {:?}, expected {:?}",
                dy.shape(),
                [b, n, oh, ow]
            )));
        }
        let (in_per, out_per) = (c * h * w, n * oh * ow);
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..b {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let dyi = &dy.data()[i * out_per..(i + 1) * out_per];
            let dxi = dx.as_mut().map(|t| &mut t.data_mut()[i * in_per..(i + 1) * in_per]);
            let k = self.weight.value.data();
            let dk = self.weight.gradient.data_mut();
            let db = self.bias.gradient.data_mut();
            if self.transposed {
                deconv_backward_raw(xi, &g, c, k, dyi, dxi, dk, db, ws);
            } else {
                conv_backward_raw(xi, &g, n, k, dyi, dxi, dk, db, ws);
            }
        }
        Ok(dx)
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_RUNNING_MOMENTUM: f32 = 0.99;

/// Per-channel batch normalization with a learned affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamBlock,
    pub beta: ParamBlock,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// What [`BatchNorm::backward`] needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ParamBlock::new(Tensor::full(&[channels], 1.0)),
            beta: ParamBlock::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4("batchnorm input")?;
        if c != self.gamma.value.len() {
            return Err(mismatch(format!("batchnorm has {} channels, input {c}", self.gamma.value.len())));
        }
        if h * w == 0 || b == 0 {
            return Err(mismatch("batchnorm needs a non-empty spatial extent"));
        }
        Ok((b, c, h * w))
    }

    /// Normalizes with the running estimates.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, plane) = self.check(x)?;
        let mut out = Tensor::zeros(x.shape());
        for ch in 0..c {
            let mean = self.running_mean.data[ch] as f64;
            let inv_std = 1.0 / (self.running_var.data[ch] as f64 + BN_EPS as f64).sqrt();
            let scale = (self.gamma.value.data[ch] as f64 * inv_std) as f32;
            let shift = (self.beta.value.data[ch] as f64 - mean * self.gamma.value.data[ch] as f64 * inv_std) as f32;
            for i in 0..b {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    out.data[j] = x.data[j] * scale + shift;
                }
            }
        }
        Ok(out)
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (b, c, plane) = self.check(x)?;
        let count = (b * plane) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_stds = vec![0.0f32; c];
        for (ch, inv_std_out) in inv_stds.iter_mut().enumerate() {
            let lanes = || (0..b).map(move |i| (i * c + ch) * plane);
            let mut s = 0.0f64;
            for base in lanes() {
                s += x.data[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = s / count;
            let mut ss = 0.0f64;
            for base in lanes() {
                ss += x.data[base..base + plane].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
            }
            let var = ss / count;
            let rm = &mut self.running_mean.data[ch];
            *rm = BN_RUNNING_MOMENTUM * *rm + (1.0 - BN_RUNNING_MOMENTUM) * mean as f32;
            let rv = &mut self.running_var.data[ch];
            *rv = BN_RUNNING_MOMENTUM * *rv + (1.0 - BN_RUNNING_MOMENTUM) * var as f32;
            let inv_std = 1.0 / (var + BN_EPS as f64).sqrt();
            *inv_std_out = inv_std as f32;
            let (g, bt) = (self.gamma.value.data[ch], self.beta.value.data[ch]);
            for base in lanes() {
                for j in base..base + plane {
                    let xh = ((x.data[j] as f64 - mean) * inv_std) as f32;
                    xhat.data[j] = xh;
                    out.data[j] = g * xh + bt;
                }
            }
        }
        Ok((out, BnCache { xhat, inv_std: inv_stds }))
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Result<Tensor> {
        let (b, c, plane) = self.check(dy)?;
        if cache.xhat.shape() != dy.shape() {
            return Err(mismatch("batchnorm gradient shape"));
        }
        let count = (b * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let lanes = || (0..b).map(move |i| (i * c + ch) * plane);
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for base in lanes() {
                for j in base..base + plane {
                    sum_dy += dy.data[j] as f64;
                    sum_dy_xh += dy.data[j] as f64 * cache.xhat.data[j] as f64;
                }
            }
            self.gamma.gradient.data[ch] += sum_dy_xh as f32;
            self.beta.gradient.data[ch] += sum_dy as f32;
            let scale = self.gamma.value.data[ch] as f64 * cache.inv_std[ch] as f64;
            let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
            for base in lanes() {
                for j in base..base + plane {
                    dx.data[j] =
                        (scale * (dy.data[j] as f64 - mean_dy - cache.xhat.data[j] as f64 * mean_dy_xh)) as f32;
                }
            }
        }
        Ok(dx)
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output (or input; the sign agrees).
pub fn relu_backward(activation: &Tensor, dy: &Tensor) -> Tensor {
    let data = activation
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Gradient through a sigmoid given its output `s`: `dy · s · (1 − s)`.
pub fn sigmoid_backward(output: &Tensor, dy: &Tensor) -> Tensor {
    let data = output
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

/// 2×2 max pooling with stride 2 over `[B, C, H, W]` (H, W even).
/// Returns the pooled tensor and, per output element, the flat index of the
/// input element it came from.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(mismatch(format!("maxpool needs even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut arg = vec![0usize; out.len()];
    for plane in 0..b * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = src[best];
                arg[o] = plane * h * w + best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(argmax: &[usize], input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(mismatch("maxpool gradient shape"));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(&dy.data) {
        dx.data[src] += g;
    }
    Ok(dx)
}

/// Concatenates `[B, Ci, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (b, _, h, w) = parts
        .first()
        .ok_or_else(|| mismatch("concat of nothing"))?
        .dims4("concat input")?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4("concat input")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(mismatch(format!("concat {:?} vs batch {b} {h}x{w}", p.shape())));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total * plane);
    for i in 0..b {
        for (p, &pc) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data[i * pc * plane..(i + 1) * pc * plane]);
        }
    }
    Tensor::from_vec(&[b, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(t: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (b, c, h, w) = t.dims4("split input")?;
    if channels.iter().sum::<usize>() != c {
        return Err(mismatch("split channel counts do not sum to input"));
    }
    let plane = h * w;
    let mut out: Vec<Vec<f32>> = channels.iter().map(|&pc| Vec::with_capacity(b * pc * plane)).collect();
    for i in 0..b {
        let mut off = i * c * plane;
        for (dst, &pc) in out.iter_mut().zip(channels) {
            dst.extend_from_slice(&t.data[off..off + pc * plane]);
            off += pc * plane;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::from_vec(&[b, pc, h, w], d))
        .collect()
}

// ---------------------------------------------------------------------------
// Weight files: a text manifest of `name dims` lines plus a little-endian f32
// blob holding the tensors back to back in manifest order.

const MANIFEST_HEADER: &str = "# quadtext weights v1";

pub fn encode_weights<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (String, Vec<u8>) {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for (name, t) in entries {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join(",")));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn decode_weights(manifest: &str, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut lines = manifest.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(TensorError::Format("missing manifest header".into()));
    }
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (no, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // a scalar has no dims, so its line is just the name
        let (name, dims) = line.split_once(' ').unwrap_or((line, ""));
        let dims = dims.trim();
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| TensorError::Format(format!("manifest line {}: {e}", no + 2)))?
        };
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(TensorError::Format(format!("blob too short for {name}")));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset = end;
        out.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    if offset != blob.len() {
        return Err(TensorError::Format(format!(
            "blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    Ok(out)
}

pub fn write_weights<'a>(
    manifest_path: &Path,
    blob_path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let (manifest, blob) = encode_weights(entries);
    std::fs::write(manifest_path, manifest)?;
    let mut f = std::fs::File::create(blob_path)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn read_weights(manifest_path: &Path, blob_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = std::fs::read_to_string(manifest_path)?;
    let mut blob = Vec::new();
    std::fs::File::open(blob_path)?.read_to_end(&mut blob)?;
    decode_weights(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), ConvSpec::default()).unwrap();
        assert_eq!(y, t(&[1, 1, 1], vec![9.0]));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[2]), ConvSpec::default()).unwrap();
        assert_eq!(y, x);
        // 3x3 identity with padding
        let mut k3 = Tensor::zeros(&[2, 2, 3, 3]);
        k3.data_mut()[4] = 1.0;
        k3.data_mut()[9 + 9 + 9 + 4] = 1.0;
        let y3 = conv2d_forward(&x, &k3, &Tensor::zeros(&[2]), ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y3, x);
    }

    #[test]
    fn conv_block_means() {
        let x = t(&[1, 4, 4], (0..16).map(|v| v as f32).collect());
        let k = Tensor::full(&[1, 1, 2, 2], 0.25);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), ConvSpec::new(2, 0)).unwrap();
        // blocks {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}
        assert_eq!(y, t(&[1, 2, 2], vec![2.5, 4.5, 10.5, 12.5]));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1]), ConvSpec::default()),
            Err(TensorError::ShapeMismatch(_))
        ));
        let x5 = Tensor::zeros(&[1, 5, 5]);
        let k2 = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x5, &k2, &Tensor::zeros(&[1]), ConvSpec::new(2, 0)).is_err());
    }

    #[test]
    fn conv_backward_trivial_cases() {
        let x = Tensor::full(&[1, 3, 3], 2.0);
        let mut k = Tensor::zeros(&[1, 1, 1, 1]);
        k.data_mut()[0] = 1.0;
        let g = conv2d_backward(&x, &k, &Tensor::full(&[1, 3, 3], 1.0), ConvSpec::default()).unwrap();
        assert_eq!(g.input, Tensor::full(&[1, 3, 3], 1.0));
        let z = conv2d_backward(&x, &k, &Tensor::zeros(&[1, 3, 3]), ConvSpec::default()).unwrap();
        assert!(z.input.data().iter().chain(z.kernel.data()).chain(z.bias.data()).all(|&v| v == 0.0));
        assert!(conv2d_backward(&x, &k, &Tensor::zeros(&[1, 2, 3]), ConvSpec::default()).is_err());
    }

    #[test]
    fn deconv_doubles_side() {
        let y = Tensor::full(&[1, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let out = deconv2d_forward(&y, &k, &Tensor::zeros(&[1]), ConvSpec::new(2, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn activations() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = ParamBlock::new(t(&[1], vec![1.0]));
        p.gradient = t(&[1], vec![2.0]);
        sgd_step([&mut p], 0.1, 0.0, 0.0);
        assert!((p.value.data()[0] - 0.8).abs() < 1e-7);
        assert_eq!(p.gradient.data()[0], 0.0);

        let mut frozen = ParamBlock::new(t(&[2], vec![0.3, -0.7]));
        frozen.gradient = t(&[2], vec![5.0, -1.0]);
        sgd_step([&mut frozen], 0.0, 0.9, 4e-4);
        assert_eq!(frozen.value.data(), &[0.3, -0.7]);

        // v1 = g1 + wd w0 ; w1 = w0 - lr v1 ; v2 = m v1 + g2 + wd w1 ; w2 = w1 - lr v2
        let (w0, g1, g2, lr, m, wd) = (0.5f32, 0.2f32, -0.1f32, 0.05f32, 0.9f32, 0.01f32);
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = m * v1 + g2 + wd * w1;
        let w2 = w1 - lr * v2;
        let mut q = ParamBlock::new(t(&[1], vec![w0]));
        q.gradient = t(&[1], vec![g1]);
        sgd_step([&mut q], lr, m, wd);
        q.gradient = t(&[1], vec![g2]);
        sgd_step([&mut q], lr, m, wd);
        assert_eq!(q.value.data()[0], w2);
        assert_eq!(q.momentum_buffer.data()[0], v2);
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4, 5, 5], &mut rng).map(|v| 3.0 * v + 1.5);
        let mut bn = BatchNorm::new(4);
        let (y, _) = bn.forward_train(&x).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| y.data()[(i * 4 + ch) * 25..(i * 4 + ch + 1) * 25].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(bn.running_mean.data().iter().all(|&m| m != 0.0));
        let inf = bn.forward(&x).unwrap();
        assert!(inf.all_finite());
    }

    #[test]
    fn maxpool_routes_gradient() {
        let x = t(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = maxpool2_backward(&arg, x.shape(), &t(&[1, 1, 1, 2], vec![1.0, 2.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[2, 1, 3, 3], &mut rng);
        let b = random(&[2, 3, 3, 3], &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 3, 3]);
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3], &mut rng);
        let b = t(&[1], vec![f32::MIN_POSITIVE]);
        let (m, blob) = encode_weights([("a", &a), ("b.bias", &b)]);
        assert_eq!(blob.len(), 4 * 7);
        let back = decode_weights(&m, &blob).unwrap();
        assert_eq!(back[0], ("a".to_string(), a));
        assert_eq!(back[1].1.data()[0].to_bits(), f32::MIN_POSITIVE.to_bits());
        assert!(decode_weights(&m, &blob[..blob.len() - 4]).is_err());
        let _ = rng.random::<u8>();
    }
}
