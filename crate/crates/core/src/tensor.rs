//! Dense `f64` tensors and a reverse-mode computation tape.
//!
//! A [`Graph`] records every operation in creation order, so creation order
//! is a valid topological order and [`Graph::backward`] is a single reverse
//! sweep. Values are immutable once recorded; only gradient slots change.
//!
//! The operator set is deliberately closed: convolution, group
//! normalization, pooling (average, global, masked), affine maps,
//! normalization, a handful of elementwise/reduction ops, and two fused
//! losses. There is no implicit broadcasting.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

/// Smallest norm accepted by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Variance epsilon used by group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: extent {extent} + 2*{pad} - {kernel} is not divisible by stride {stride}")]
    InexactOutput {
        op: &'static str,
        extent: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("l2_normalize: vector norm {norm:e} is below {eps:e} (collapsed embedding)")]
    ZeroNorm { norm: f64, eps: f64 },
    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("{0}")]
    InvalidArgument(&'static str),
}

pub type Result<T, E = TensorError> = core::result::Result<T, E>;

/// Row-major dense array of `f64`.
///
/// An empty shape denotes a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "extents must be positive",
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "element count must be preserved",
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cells of one sample's spatial grid pooled into a single row by
/// [`Graph::masked_avg_pool`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolRegion {
    pub sample: usize,
    /// Raster indices (`row * width + col`) into the `H x W` grid, ascending.
    pub cells: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    AvgPool2(Var),
    Gap(Var),
    MaskedAvgPool {
        input: Var,
        regions: Vec<PoolRegion>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    InfoNce {
        query: Var,
        positive: Var,
        negatives: Option<Var>,
        tau: f64,
        probs: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Single owner; not shared between threads.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(op: &'static str, extent: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument("stride must be at least 1"));
    }
    let padded = extent + 2 * pad;
    if kernel > padded {
        return Err(TensorError::InvalidShape {
            op,
            shape: vec![extent, kernel, pad],
            reason: "kernel larger than padded input",
        });
    }
    if (padded - kernel) % stride != 0 {
        return Err(TensorError::InexactOutput {
            op,
            extent,
            kernel,
            pad,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the strided extents requested by every caller
    // (checked by the debug assertion for c, and by construction for a, b).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor of the node's shape (zeros if never reached).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&node.value.shape),
        }
    }

    /// Clears every gradient slot and re-arms [`Graph::backward`].
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Cross-correlation of `input [N,C,H,W]` with `weight [F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out("conv2d", h, kh, pad, stride)?;
        let wo = conv_out("conv2d", w, kw, pad, stride)?;
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let k = c * kh * kw;
        let p = ho * wo;
        let mut out = vec![0.0; n * f * p];
        let mut cols = vec![0.0; k * p];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for s in 0..n {
            g.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
            gemm(
                f,
                k,
                p,
                wt,
                (k, 1),
                &cols,
                (p, 1),
                0.0,
                &mut out[s * f * p..(s + 1) * f * p],
            );
        }
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            Tensor {
                shape: vec![n, f, ho, wo],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-sample group normalization of `[N,C,H,W]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "group_norm",
                shape: xs,
                reason: "expected [N,C,H,W]",
            });
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidArgument(
                "group_norm: channel count must be divisible by groups",
            ));
        }
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(shape_err("group_norm", &xs, self.shape(v)));
            }
        }
        let cg = c / groups;
        let m = (cg * hw) as f64;
        let x = self.value(input).data();
        let ga = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        let mut means = vec![0.0; n * groups];
        let mut rstds = vec![0.0; n * groups];
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cg) * hw;
                let chunk = &x[base..base + cg * hw];
                let mean = chunk.iter().sum::<f64>() / m;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let rstd = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
                means[s * groups + g] = mean;
                rstds[s * groups + g] = rstd;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let off = base + cc * hw;
                    for i in 0..hw {
                        out[off + i] = ga[ch] * ((x[off + i] - mean) * rstd) + be[ch];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor {
                shape: xs,
                data: out,
            },
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::Relu(input), rg)
    }

    /// Sign pattern (`input > 0`) of every ReLU input on the tape, in
    /// creation order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(input) = n.op {
                out.extend(self.value(input).data.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// 2x2 average pooling with stride 2 over `[N,C,H,W]` (H, W even).
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                shape: xs,
                reason: "expected [N,C,H,W] with even H and W",
            });
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; nc * ho * wo];
        for p in 0..nc {
            let src = &x[p * h * w..];
            for oy in 0..ho {
                for ox in 0..wo {
                    let a = src[2 * oy * w + 2 * ox];
                    let b = src[2 * oy * w + 2 * ox + 1];
                    let c = src[(2 * oy + 1) * w + 2 * ox];
                    let d = src[(2 * oy + 1) * w + 2 * ox + 1];
                    out[(p * ho + oy) * wo + ox] = 0.25 * (a + b + c + d);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![xs[0], xs[1], ho, wo],
                data: out,
            },
            Op::AvgPool2(input),
            rg,
        ))
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "gap",
                shape: xs,
                reason: "expected [N,C,H,W]",
            });
        }
        let hw = xs[2] * xs[3];
        let x = self.value(input).data();
        // Same summation order as masked_avg_pool over a full mask.
        let data = x
            .chunks_exact(hw)
            .map(|plane| plane.iter().fold(0.0, |acc, v| acc + v) / hw as f64)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![xs[0], xs[1]],
                data,
            },
            Op::Gap(input),
            rg,
        ))
    }

    /// Masked average pooling: one `[C]` row per region, giving `[R,C]`.
    ///
    /// Row `r` is `sum_{ij in cells} z_ij / |cells|` over sample
    /// `regions[r].sample` of `input [N,C,H,W]`.
    pub fn masked_avg_pool(&mut self, input: Var, regions: Vec<PoolRegion>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || regions.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "masked_avg_pool",
                shape: xs,
                reason: "expected [N,C,H,W] and at least one region",
            });
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for r in &regions {
            if r.sample >= n || r.cells.is_empty() || r.cells.iter().any(|&i| i >= hw) {
                return Err(TensorError::InvalidArgument(
                    "masked_avg_pool: region refers to a missing sample or cell, or is empty",
                ));
            }
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; regions.len() * c];
        for (ri, r) in regions.iter().enumerate() {
            let cnt = r.cells.len() as f64;
            for ch in 0..c {
                let plane = &x[(r.sample * c + ch) * hw..][..hw];
                out[ri * c + ch] = r.cells.iter().fold(0.0, |acc, &i| acc + plane[i]) / cnt;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![regions.len(), c],
                data: out,
            },
            Op::MaskedAvgPool { input, regions },
            rg,
        ))
    }

    /// Affine map `x [N,in] -> x W^T + b`, `W [out,in]`, `b [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(shape_err("linear", &ws, &bs));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let row = &x[i * din..(i + 1) * din];
            for o in 0..dout {
                out[i * dout + o] = dot(row, &w[o * din..(o + 1) * din]) + b[o];
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor {
                shape: vec![n, dout],
                data: out,
            },
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// `x / ||x||_2` along the last axis.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let d = *t.shape.last().unwrap_or(&1);
        let mut out = t.data.clone();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let norm = libm::sqrt(dot(row, row));
            if !(norm > NORM_EPS) {
                return Err(TensorError::ZeroNorm {
                    norm,
                    eps: NORM_EPS,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = t.shape.clone();
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data: out }, Op::L2Normalize { input, norms }, rg))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(TensorError::InvalidArgument("stack: no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(s0.iter().product::<usize>() * inputs.len());
        for &v in inputs {
            if self.shape(v) != s0.as_slice() {
                return Err(shape_err("stack", &s0, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&s0);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor { shape, data }, Op::Stack(inputs.to_vec()), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Gathers leading-axis slices `input[rows[i]]`.
    pub fn select_rows(&mut self, input: Var, rows: Vec<usize>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= xs[0]) {
            return Err(TensorError::InvalidArgument(
                "select_rows: row index out of range or empty selection",
            ));
        }
        let inner: usize = xs[1..].iter().product();
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in &rows {
            data.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut shape = xs.clone();
        shape[0] = rows.len();
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data }, Op::SelectRows { input, rows }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|v| v * factor).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise InfoNCE: for each row `q_i` of `query [M,D]`,
    /// `-log(exp(q_i.p_i/tau) / (exp(q_i.p_i/tau) + sum_j exp(q_i.n_j/tau)))`
    /// with positives `[M,D]` and optional negatives `[L,D]`. Output `[M]`.
    ///
    /// Positives and negatives are treated as stop-gradient.
    pub fn info_nce(
        &mut self,
        query: Var,
        positive: Var,
        negatives: Option<Var>,
        tau: f64,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(TensorError::InvalidArgument("info_nce: tau must be positive"));
        }
        let qs = self.shape(query).to_vec();
        if qs.len() != 2 || self.shape(positive) != qs.as_slice() {
            return Err(shape_err("info_nce", &qs, self.shape(positive)));
        }
        let (m, d) = (qs[0], qs[1]);
        let nl = match negatives {
            Some(nv) => {
                let ns = self.shape(nv);
                if ns.len() != 2 || ns[1] != d {
                    return Err(shape_err("info_nce", &qs, ns));
                }
                ns[0]
            }
            None => 0,
        };
        let q = self.value(query).data();
        let p = self.value(positive).data();
        let neg: &[f64] = match negatives {
            Some(nv) => self.value(nv).data(),
            None => &[],
        };
        let width = nl + 1;
        let mut probs = vec![0.0; m * width];
        let mut losses = vec![0.0; m];
        for i in 0..m {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut probs[i * width..(i + 1) * width];
            row[0] = dot(qi, &p[i * d..(i + 1) * d]) / tau;
            for j in 0..nl {
                row[j + 1] = dot(qi, &neg[j * d..(j + 1) * d]) / tau;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let l0 = row[0];
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
            losses[i] = mx + libm::log(z) - l0;
        }
        let rg = self.rg(query);
        Ok(self.push(
            Tensor {
                shape: vec![m],
                data: losses,
            },
            Op::InfoNce {
                query,
                positive,
                negatives,
                tau,
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits [N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || targets.iter().any(|&t| t >= ls[1]) {
            return Err(TensorError::InvalidArgument(
                "softmax_cross_entropy: targets must index the class axis of [N,K] logits",
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[i * k..(i + 1) * k];
            let mut z = 0.0;
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = libm::exp(v - mx);
                z += *p;
            }
            pr.iter_mut().for_each(|p| *p /= z);
            total += mx + libm::log(z) - row[targets[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root, accumulating into every node that
    /// requires gradients. Gradients reaching a node along several paths are
    /// summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gy) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop_node(node, gy, before);
        }
        Ok(())
    }
}

fn backprop_node(node: &Node, gy: &[f64], before: &mut [Node]) {
    let want = |before: &[Node], v: Var| before[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        } => {
            let xs = before[input.0].value.shape.clone();
            let ws = before[weight.0].value.shape.clone();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (f, kh, kw) = (ws[0], ws[2], ws[3]);
            let ys = &node.value.shape;
            let (ho, wo) = (ys[2], ys[3]);
            let g = ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                ho,
                wo,
                stride: *stride,
                pad: *pad,
            };
            let k = c * kh * kw;
            let p = ho * wo;
            let need_x = want(before, *input);
            let need_w = want(before, *weight);
            let mut cols = vec![0.0; k * p];
            let mut dw = if need_w { vec![0.0; f * k] } else { Vec::new() };
            let mut dx = if need_x { vec![0.0; n * c * h * w] } else { Vec::new() };
            let x = before[input.0].value.data();
            let wt = before[weight.0].value.data();
            for s in 0..n {
                let gys = &gy[s * f * p..(s + 1) * f * p];
                if need_w {
                    g.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
                    // dW[F,K] += dY[F,P] * cols^T
                    gemm(f, p, k, gys, (p, 1), &cols, (1, p), 1.0, &mut dw);
                }
                if need_x {
                    // dcols[K,P] = W^T[K,F] * dY[F,P]
                    gemm(k, f, p, wt, (1, k), gys, (p, 1), 0.0, &mut cols);
                    g.col2im_add(&cols, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                }
            }
            if need_w {
                add_into(&mut before[weight.0].grad, &dw);
            }
            if need_x {
                add_into(&mut before[input.0].grad, &dx);
            }
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xs = &node.value.shape;
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let cg = c / groups;
            let m = (cg * hw) as f64;
            let x = before[input.0].value.data();
            let ga = before[gamma.0].value.data();
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for g in 0..*groups {
                    let mu = mean[s * groups + g];
                    let rs = rstd[s * groups + g];
                    let base = (s * c + g * cg) * hw;
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let off = base + cc * hw;
                        for i in 0..hw {
                            let xh = (x[off + i] - mu) * rs;
                            let d = gy[off + i];
                            dgamma[ch] += d * xh;
                            dbeta[ch] += d;
                            let dxh = d * ga[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let off = base + cc * hw;
                        for i in 0..hw {
                            let xh = (x[off + i] - mu) * rs;
                            let dxh = gy[off + i] * ga[ch];
                            dx[off + i] = rs / m * (m * dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                }
            }
            if want(before, *input) {
                add_into(&mut before[input.0].grad, &dx);
            }
            if want(before, *gamma) {
                add_into(&mut before[gamma.0].grad, &dgamma);
            }
            if want(before, *beta) {
                add_into(&mut before[beta.0].grad, &dbeta);
            }
        }
        Op::Relu(input) => {
            let x = before[input.0].value.data();
            let dx: Vec<f64> = x
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::AvgPool2(input) => {
            let xs = before[input.0].value.shape.clone();
            let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut dx = vec![0.0; nc * h * w];
            for p in 0..nc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = 0.25 * gy[(p * ho + oy) * wo + ox];
                        let b = p * h * w;
                        dx[b + 2 * oy * w + 2 * ox] += g;
                        dx[b + 2 * oy * w + 2 * ox + 1] += g;
                        dx[b + (2 * oy + 1) * w + 2 * ox] += g;
                        dx[b + (2 * oy + 1) * w + 2 * ox + 1] += g;
                    }
                }
            }
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::Gap(input) => {
            let xs = &before[input.0].value.shape;
            let hw = xs[2] * xs[3];
            let mut dx = Vec::with_capacity(gy.len() * hw);
            for &g in gy {
                let v = g / hw as f64;
                dx.extend(core::iter::repeat_n(v, hw));
            }
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::MaskedAvgPool { input, regions } => {
            let xs = &before[input.0].value.shape;
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut dx = vec![0.0; n * c * hw];
            for (ri, r) in regions.iter().enumerate() {
                let cnt = r.cells.len() as f64;
                for ch in 0..c {
                    let g = gy[ri * c + ch] / cnt;
                    let plane = &mut dx[(r.sample * c + ch) * hw..][..hw];
                    for &i in &r.cells {
                        plane[i] += g;
                    }
                }
            }
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let xs = &before[input.0].value.shape;
            let ws = &before[weight.0].value.shape;
            let (n, din, dout) = (xs[0], xs[1], ws[0]);
            let x = before[input.0].value.data();
            let w = before[weight.0].value.data();
            if want(before, *input) {
                let mut dx = vec![0.0; n * din];
                for i in 0..n {
                    let dr = &mut dx[i * din..(i + 1) * din];
                    for o in 0..dout {
                        let g = gy[i * dout + o];
                        for (d, wv) in dr.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                            *d += g * wv;
                        }
                    }
                }
                add_into(&mut before[input.0].grad, &dx);
            }
            if want(before, *weight) {
                let mut dw = vec![0.0; dout * din];
                for i in 0..n {
                    let xr = &x[i * din..(i + 1) * din];
                    for o in 0..dout {
                        let g = gy[i * dout + o];
                        for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                            *d += g * xv;
                        }
                    }
                }
                add_into(&mut before[weight.0].grad, &dw);
            }
            if want(before, *bias) {
                let mut db = vec![0.0; dout];
                for i in 0..n {
                    for o in 0..dout {
                        db[o] += gy[i * dout + o];
                    }
                }
                add_into(&mut before[bias.0].grad, &db);
            }
        }
        Op::L2Normalize { input, norms } => {
            let y = node.value.data();
            let d = y.len() / norms.len();
            let mut dx = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &gy[r * d..(r + 1) * d];
                let proj = dot(yr, gr);
                for j in 0..d {
                    dx[r * d + j] = (gr[j] - yr[j] * proj) / norm;
                }
            }
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::Stack(inputs) => {
            let inner = gy.len() / inputs.len();
            for (i, v) in inputs.iter().enumerate() {
                if want(before, *v) {
                    add_into(&mut before[v.0].grad, &gy[i * inner..(i + 1) * inner]);
                }
            }
        }
        Op::Reshape(input) => add_into(&mut before[input.0].grad, gy),
        Op::SelectRows { input, rows } => {
            let n = before[input.0].value.numel();
            let inner = gy.len() / rows.len();
            let mut dx = vec![0.0; n];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..inner {
                    dx[r * inner + j] += gy[i * inner + j];
                }
            }
            add_into(&mut before[input.0].grad, &dx);
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if want(before, v) {
                    add_into(&mut before[v.0].grad, gy);
                }
            }
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = before[b.0].value.data().iter().zip(gy).map(|(x, g)| x * g).collect();
            let db: Vec<f64> = before[a.0].value.data().iter().zip(gy).map(|(x, g)| x * g).collect();
            if want(before, *a) {
                add_into(&mut before[a.0].grad, &da);
            }
            if want(before, *b) {
                add_into(&mut before[b.0].grad, &db);
            }
        }
        Op::Scale(a, factor) => {
            let da: Vec<f64> = gy.iter().map(|g| g * factor).collect();
            add_into(&mut before[a.0].grad, &da);
        }
        Op::Sum(a) => {
            let n = before[a.0].value.numel();
            add_into(&mut before[a.0].grad, &vec![gy[0]; n]);
        }
        Op::Mean(a) => {
            let n = before[a.0].value.numel();
            add_into(&mut before[a.0].grad, &vec![gy[0] / n as f64; n]);
        }
        Op::InfoNce {
            query,
            positive,
            negatives,
            tau,
            probs,
        } => {
            let qs = &before[query.0].value.shape;
            let (m, d) = (qs[0], qs[1]);
            let p = before[positive.0].value.data();
            let neg: &[f64] = match negatives {
                Some(nv) => before[nv.0].value.data(),
                None => &[],
            };
            let width = probs.len() / m;
            let mut dq = vec![0.0; m * d];
            for i in 0..m {
                let pr = &probs[i * width..(i + 1) * width];
                let scale = gy[i] / tau;
                let row = &mut dq[i * d..(i + 1) * d];
                let w0 = (pr[0] - 1.0) * scale;
                for (r, pv) in row.iter_mut().zip(&p[i * d..(i + 1) * d]) {
                    *r += w0 * pv;
                }
                for j in 1..width {
                    let wj = pr[j] * scale;
                    for (r, nv) in row.iter_mut().zip(&neg[(j - 1) * d..j * d]) {
                        *r += wj * nv;
                    }
                }
            }
            add_into(&mut before[query.0].grad, &dq);
        }
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => {
            let n = targets.len();
            let k = probs.len() / n;
            let s = gy[0] / n as f64;
            let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
            for (i, &t) in targets.iter().enumerate() {
                dl[i * k + t] -= s;
            }
            add_into(&mut before[logits.0].grad, &dl);
        }
    }
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences, over every coordinate of every input.
///
/// `build` maps leaves (one per entry of `inputs`) to a scalar. The error of
/// one coordinate is `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(grad_check_impl(build, inputs, h, false)?.expect("kinks are not tracked"))
}

/// Like [`grad_check`], but returns `None` when some perturbation `±h`
/// changes the sign pattern of a ReLU input. Across such a kink a central
/// difference does not approximate the derivative.
pub fn grad_check_piecewise<F>(build: F, inputs: &[Tensor], h: f64) -> Result<Option<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_impl(build, inputs, h, true)
}

fn grad_check_impl<F>(build: F, inputs: &[Tensor], h: f64, track_kinks: bool) -> Result<Option<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument("grad_check: step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    let pattern = if track_kinks { g.relu_pattern() } else { Vec::new() };
    drop(g);

    let eval = |ins: &[Tensor]| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        let same = !track_kinks || g.relu_pattern() == pattern;
        Ok((g.value(root).item(), same))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data[j];
            work[i].data[j] = orig + h;
            let (fp, sp) = eval(&work)?;
            work[i].data[j] = orig - h;
            let (fm, sm) = eval(&work)?;
            work[i].data[j] = orig;
            if !(sp && sm) {
                return Ok(None);
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = libm::fabs(analytic[i].data[j] - fd) / f64::max(1.0, libm::fabs(fd));
            worst = worst.max(err);
        }
    }
    Ok(Some(worst))
}
