//! Dense f64 tensors with reverse-mode differentiation on a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order; [`Graph::backward`] replays the tape once in reverse, accumulating
//! gradients into every node that requires them. Tensors are immutable once
//! written, forward results are bitwise deterministic single-threaded, and
//! two graphs never share mutable state.
//!
//! Long-lived parameters live outside the tape in a [`ParamStore`];
//! [`Graph::bind`] inserts them as leaves, caching the binding so that a
//! parameter bound twice in one graph (weight sharing) maps to a single node
//! and its gradient contributions accumulate.

pub mod gradcheck;
pub mod init;
pub mod kernels;


use std::collections::HashMap;

use crate::error::{CsqaError, Result};
use init::{derive_rng, fnv1a, init_values, Init};
pub use kernels::CropSpec;

/// Handle to a node on one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// The 1/√(var+eps) floor used by layer_norm; small enough that normalized
/// rows hit unit variance to ~1e-12 at desk scale.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Batch-norm variance epsilon.
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sigmoid { x: usize },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    TopVSoftmax { x: usize, v: usize, selected: Vec<u32> },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    Matmul { a: usize, b: usize },
    Transpose2 { x: usize },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    SelectCols { x: usize, cols: Vec<usize> },
    Conv2d { input: usize, kernel: usize, bias: Option<usize>, stride: usize, padding: usize, groups: usize },
    Conv1dChannel { x: usize, kernel: usize },
    DwConvSeq { x: usize, kernel: usize, bias: Option<usize> },
    AvgPoolGlobal { x: usize },
    MaxPoolGlobal { x: usize, argmax: Vec<u32> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    CropResize { images: usize, crops: Vec<CropSpec>, out_h: usize, out_w: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::TopVSoftmax { .. } => "topv_softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Matmul { .. } => "matmul",
            Op::Transpose2 { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::SelectCols { .. } => "select_cols",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1dChannel { .. } => "conv1d_channel",
            Op::DwConvSeq { .. } => "dwconv_seq",
            Op::AvgPoolGlobal { .. } => "avg_pool_global",
            Op::MaxPoolGlobal { .. } => "max_pool_global",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CropResize { .. } => "crop_resize",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recorded forward pass: the computation tape plus all node storage.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(_bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CsqaError::NonFinite { op: op.name(), node: self.nodes.len(), shape });
        }
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Ok(Tensor(self.nodes.len() - 1))
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf_with_grad(data, shape, false)
    }

    pub fn leaf_with_grad(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CsqaError::dim(
                0,
                format!("leaf data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CsqaError::dim(0, format!("zero extent in shape {:?}", shape)));
        }
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], &[1])
    }

    pub fn ones(&mut self, shape: &[usize]) -> Result<Tensor> {
        self.leaf(vec![1.0; shape.iter().product()], shape)
    }

    /// Bind a stored parameter as a leaf. Binding the same id twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> Result<Tensor> {
        if let Some(t) = self.bound.get(&id) {
            return Ok(*t);
        }
        let p = store.param(id);
        let t = self.leaf_with_grad(p.data.clone(), &p.shape, p.kind != ParamKind::Buffer)?;
        self.bound.insert(id, t);
        Ok(t)
    }

    // ── accessors ─────────────────────────────────────────────────────

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].data.len()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Gradient of a bound parameter, if the parameter was bound and reached
    /// by backward.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound.get(&id).and_then(|t| self.grad(*t))
    }

    pub fn bound_node(&self, id: ParamId) -> Option<Tensor> {
        self.bound.get(&id).copied()
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ── elementwise / arithmetic ──────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (data, shape) = kernels::broadcast_binary(
            self.data(a), self.shape(a), self.data(b), self.shape(b), |x, y| x + y)?;
        self.push(shape, data, self.rg(a) || self.rg(b), Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (data, shape) = kernels::broadcast_binary(
            self.data(a), self.shape(a), self.data(b), self.shape(b), |x, y| x - y)?;
        self.push(shape, data, self.rg(a) || self.rg(b), Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (data, shape) = kernels::broadcast_binary(
            self.data(a), self.shape(a), self.data(b), self.shape(b), |x, y| x * y)?;
        self.push(shape, data, self.rg(a) || self.rg(b), Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, self.rg(x), Op::Scale { x: x.0, c })
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let data = self.data(x).iter().map(|v| sigmoid(*v)).collect();
        self.push(self.shape(x).to_vec(), data, self.rg(x), Op::Sigmoid { x: x.0 })
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, self.rg(x), Op::Relu { x: x.0 })
    }

    /// Blocks gradient flow across this edge; the value passes through.
    pub fn stop_gradient(&mut self, x: Tensor) -> Result<Tensor> {
        let data = self.data(x).to_vec();
        self.push(self.shape(x).to_vec(), data, false, Op::StopGrad)
    }

    // ── softmax family ────────────────────────────────────────────────

    fn check_axis(&self, t: Tensor, axis: usize) -> Result<()> {
        let shape = self.shape(t);
        if axis >= shape.len() {
            return Err(CsqaError::dim(
                axis,
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - mx).exp();
                    data[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[at(a)] /= sum;
                }
            }
        }
        self.push(shape, data, self.rg(x), Op::Softmax { x: x.0, axis })
    }

    pub fn log_softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    sum += (src[at(a)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for a in 0..len {
                    data[at(a)] = src[at(a)] - lse;
                }
            }
        }
        self.push(shape, data, self.rg(x), Op::LogSoftmax { x: x.0, axis })
    }

    /// Per-row softmax over the last axis restricted to the `v` largest
    /// logits; the rest are excluded from the normalization and emit exact
    /// zeros. Ties select the smaller index.
    pub fn topv_softmax(&mut self, x: Tensor, v: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| CsqaError::dim(0, "topv_softmax on 0-d tensor"))?;
        if v == 0 || v > len {
            return Err(CsqaError::Config(format!(
                "top-v {} outside 1..={} (row length)",
                v, len
            )));
        }
        let rows = self.numel(x) / len;
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        let mut selected = Vec::with_capacity(rows * v);
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            let mut idx: Vec<u32> = (0..len as u32).collect();
            idx.sort_by(|&i, &j| {
                row[j as usize]
                    .partial_cmp(&row[i as usize])
                    .unwrap()
                    .then(i.cmp(&j))
            });
            let mut sel: Vec<u32> = idx[..v].to_vec();
            sel.sort_unstable();
            let mx = sel.iter().map(|&i| row[i as usize]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in &sel {
                let e = (row[i as usize] - mx).exp();
                data[r * len + i as usize] = e;
                sum += e;
            }
            for &i in &sel {
                data[r * len + i as usize] /= sum;
            }
            selected.extend_from_slice(&sel);
        }
        self.push(shape, data, self.rg(x), Op::TopVSoftmax { x: x.0, v, selected })
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + a) * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(out_shape, data, self.rg(x), Op::SumAxis { x: x.0, axis })
    }

    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let s: f64 = self.data(x).iter().sum();
        self.push(vec![1], vec![s], self.rg(x), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.numel(x) as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    // ── linear algebra / movement ─────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CsqaError::dim(0, format!("matmul expects 2-d operands, got {:?} and {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(CsqaError::dim(
                1,
                format!("matmul inner dimensions differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push(vec![m, n], data, self.rg(a) || self.rg(b), Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn transpose2(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CsqaError::dim(0, format!("transpose expects a 2-d tensor, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], data, self.rg(x), Op::Transpose2 { x: x.0 })
    }

    /// x[m,k] @ w[k,n] + b[n]
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(CsqaError::dim(
                0,
                format!("reshape {:?} -> {:?} changes element count", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(shape.to_vec(), data, self.rg(x), Op::Reshape { x: x.0 })
    }

    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(CsqaError::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        self.check_axis(xs[0], axis)?;
        let mut axis_total = 0usize;
        for &t in xs {
            let s = self.shape(t);
            if s.len() != first.len() {
                return Err(CsqaError::dim(0, format!("concat rank mismatch: {:?} vs {:?}", first, s)));
            }
            for (ax, (&d0, &d1)) in first.iter().zip(s.iter()).enumerate() {
                if ax != axis && d0 != d1 {
                    return Err(CsqaError::dim(
                        ax,
                        format!("concat shapes differ off-axis: {:?} vs {:?}", first, s),
                    ));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &t in xs {
            let len = self.shape(t)[axis];
            let src = self.data(t);
            for o in 0..outer {
                let src_block = &src[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + len * inner].copy_from_slice(src_block);
            }
            offset += len;
        }
        let rg = xs.iter().any(|&t| self.rg(t));
        self.push(out_shape, data, rg, Op::Concat { xs: xs.iter().map(|t| t.0).collect(), axis })
    }

    pub fn narrow(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] || len == 0 {
            return Err(CsqaError::dim(
                axis,
                format!("narrow [{}, {}) exceeds extent {} on axis {}", start, start + len, shape[axis], axis),
            ));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * full + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(out_shape, data, self.rg(x), Op::Narrow { x: x.0, axis, start })
    }

    /// Gather columns of a 2-d tensor (duplicates allowed).
    pub fn select_cols(&mut self, x: Tensor, cols: &[usize]) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CsqaError::dim(0, format!("select_cols expects 2-d, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        for &c in cols {
            if c >= n {
                return Err(CsqaError::dim(1, format!("column {} out of range {}", c, n)));
            }
        }
        let src = self.data(x);
        let mut data = vec![0.0; m * cols.len()];
        for i in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                data[i * cols.len() + j] = src[i * n + c];
            }
        }
        self.push(vec![m, cols.len()], data, self.rg(x), Op::SelectCols { x: x.0, cols: cols.to_vec() })
    }

    // ── convolutions / pooling ────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let d = kernels::conv2d_dims(self.shape(input), self.shape(kernel), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.c_out] {
                return Err(CsqaError::dim(
                    0,
                    format!("conv2d bias shape {:?}, expected [{}]", self.shape(b), d.c_out),
                ));
            }
        }
        let data = kernels::conv2d_forward(self.data(input), self.data(kernel), bias.map(|b| self.data(b)), &d);
        let rg = self.rg(input) || self.rg(kernel) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            vec![d.batch, d.c_out, d.h_out, d.w_out],
            data,
            rg,
            Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.map(|b| b.0), stride, padding, groups },
        )
    }

    /// 1-d convolution over the channel axis of a [B, C] tensor with a single
    /// odd-length kernel, zero padding (the ECA gate's κ).
    pub fn conv1d_channel(&mut self, x: Tensor, kernel: Tensor) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CsqaError::dim(0, format!("conv1d_channel expects [B, C], got {:?}", s)));
        }
        let ks = self.shape(kernel);
        if ks.len() != 1 || ks[0] % 2 == 0 {
            return Err(CsqaError::Config(format!(
                "conv1d_channel kernel must be odd-length 1-d, got {:?}",
                ks
            )));
        }
        let (b, c) = (s[0], s[1]);
        let k = ks[0];
        let pad = (k - 1) / 2;
        let src = self.data(x);
        let w = self.data(kernel);
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let p = ci as isize + j as isize - pad as isize;
                    if p >= 0 && (p as usize) < c {
                        acc += w[j] * src[bi * c + p as usize];
                    }
                }
                data[bi * c + ci] = acc;
            }
        }
        self.push(vec![b, c], data, self.rg(x) || self.rg(kernel), Op::Conv1dChannel { x: x.0, kernel: kernel.0 })
    }

    /// Depthwise 1-d convolution along the sequence axis of [L, C] tokens:
    /// each channel has its own odd-length kernel, zero padding.
    pub fn dwconv_seq(&mut self, x: Tensor, kernel: Tensor, bias: Option<Tensor>) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CsqaError::dim(0, format!("dwconv_seq expects [L, C], got {:?}", s)));
        }
        let (l, c) = (s[0], s[1]);
        let ks = self.shape(kernel);
        if ks.len() != 2 || ks[0] != c || ks[1] % 2 == 0 {
            return Err(CsqaError::dim(
                0,
                format!("dwconv_seq kernel must be [{}, odd], got {:?}", c, ks),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(CsqaError::dim(0, format!("dwconv_seq bias shape {:?}, expected [{}]", self.shape(b), c)));
            }
        }
        let k = ks[1];
        let pad = (k - 1) / 2;
        let src = self.data(x);
        let w = self.data(kernel);
        let mut data = vec![0.0; l * c];
        for li in 0..l {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let p = li as isize + j as isize - pad as isize;
                    if p >= 0 && (p as usize) < l {
                        acc += w[ci * k + j] * src[p as usize * c + ci];
                    }
                }
                data[li * c + ci] = acc;
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for li in 0..l {
                for ci in 0..c {
                    data[li * c + ci] += bd[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(vec![l, c], data, rg, Op::DwConvSeq { x: x.0, kernel: kernel.0, bias: bias.map(|b| b.0) })
    }

    /// Global average pool [B,C,H,W] -> [B,C].
    pub fn avg_pool_global(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(CsqaError::dim(0, format!("pool expects [B,C,H,W], got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = self.data(x);
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            let mut acc = 0.0;
            for v in src[i * plane..(i + 1) * plane].iter() {
                acc += v;
            }
            data[i] = acc / plane as f64;
        }
        self.push(vec![b, c], data, self.rg(x), Op::AvgPoolGlobal { x: x.0 })
    }

    /// Global max pool [B,C,H,W] -> [B,C]; the gradient routes to the first
    /// argmax element in row-major order on ties.
    pub fn max_pool_global(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(CsqaError::dim(0, format!("pool expects [B,C,H,W], got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = self.data(x);
        let mut data = vec![0.0; b * c];
        let mut argmax = vec![0u32; b * c];
        for i in 0..b * c {
            let slice = &src[i * plane..(i + 1) * plane];
            let mut best = slice[0];
            let mut best_at = 0u32;
            for (j, v) in slice.iter().enumerate().skip(1) {
                if *v > best {
                    best = *v;
                    best_at = j as u32;
                }
            }
            data[i] = best;
            argmax[i] = best_at;
        }
        self.push(vec![b, c], data, self.rg(x), Op::MaxPoolGlobal { x: x.0, argmax })
    }

    // ── normalization ─────────────────────────────────────────────────

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// learnable scale and shift.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| CsqaError::dim(0, "layer_norm on 0-d tensor"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(CsqaError::dim(
                0,
                format!("layer_norm scale/shift must be [{}], got {:?}/{:?}", dim, self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.numel(x) / dim;
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mean: f64 = row.iter().sum::<f64>() / dim as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                xhat[r * dim + j] = (row[j] - mean) * rs;
            }
        }
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            for j in 0..dim {
                data[r * dim + j] = xhat[r * dim + j] * g[j] + be[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(shape, data, rg, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd })
    }

    /// Per-channel batch normalization over [B,C,H,W]. In train mode the
    /// batch statistics are used (and returned so the caller can update its
    /// running buffers); in eval mode the provided running statistics are.
    pub fn batch_norm2d(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        train: bool,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CsqaError::dim(0, format!("batch_norm expects [B,C,H,W], got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CsqaError::dim(1, "batch_norm scale/shift must match channel count".to_string()));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(CsqaError::dim(1, "batch_norm running stats must match channel count".to_string()));
        }
        let plane = h * w;
        let n = (b * plane) as f64;
        let src = self.data(x);
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        if train {
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    for v in src[(bi * c + ci) * plane..][..plane].iter() {
                        acc += v;
                    }
                }
                mean[ci] = acc / n;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut acc = 0.0;
                for bi in 0..b {
                    for v in src[(bi * c + ci) * plane..][..plane].iter() {
                        acc += (v - m) * (v - m);
                    }
                }
                var[ci] = acc / n;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, rs) = (mean[ci], rstd[ci]);
                for j in 0..plane {
                    xhat[base + j] = (src[base + j] - m) * rs;
                }
            }
        }
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for j in 0..plane {
                    data[base + j] = xhat[base + j] * g[ci] + be[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = self.push(s, data, rg, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd, train })?;
        Ok((t, mean, var))
    }

    // ── crop/resize ───────────────────────────────────────────────────

    /// Bilinear crop-resize with half-pixel centers; differentiable with
    /// respect to the source pixels (boxes are constants).
    pub fn crop_resize(
        &mut self,
        images: Tensor,
        crops: &[CropSpec],
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let s = self.shape(images).to_vec();
        if s.len() != 4 {
            return Err(CsqaError::dim(0, format!("crop_resize expects [B,C,H,W], got {:?}", s)));
        }
        if crops.is_empty() || out_h == 0 || out_w == 0 {
            return Err(CsqaError::Usage("crop_resize with empty crops or zero output extent".into()));
        }
        for cr in crops {
            if cr.image >= s[0] {
                return Err(CsqaError::Usage(format!("crop references image {} of batch {}", cr.image, s[0])));
            }
            if !(cr.x0 < cr.x1 && cr.y0 < cr.y1) {
                return Err(CsqaError::Usage(format!("degenerate crop box {:?}", cr)));
            }
        }
        let data = kernels::crop_resize_forward(self.data(images), &s, crops, out_h, out_w);
        let rg = self.rg(images);
        self.push(
            vec![crops.len(), s[1], out_h, out_w],
            data,
            rg,
            Op::CropResize { images: images.0, crops: crops.to_vec(), out_h, out_w },
        )
    }

    // ── backward ──────────────────────────────────────────────────────

    fn acc_grad(&mut self, node: usize, update: &[f64]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let numel = self.nodes[node].data.len();
        debug_assert_eq!(update.len(), numel);
        let g = self.nodes[node].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (gi, u) in g.iter_mut().zip(update.iter()) {
            *gi += u;
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires gradient and is reachable from the loss.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(CsqaError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.data(loss)[0].is_finite() {
            return Err(CsqaError::NonFinite { op: "loss", node: loss.0, shape: vec![1] });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx);
        }
        // The tape invariant: every gradient written by the pass is finite.
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CsqaError::NonFinite { op: node.op.name(), node: idx, shape: node.shape.clone() });
                }
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let d_out = self.nodes[idx].grad.clone().expect("grad present");
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add { a, b } => {
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let so = self.nodes[idx].shape.clone();
                let da = kernels::reduce_to_shape(&d_out, &so, &sa);
                self.acc_grad(a, &da);
                let db = kernels::reduce_to_shape(&d_out, &so, &sb);
                self.acc_grad(b, &db);
            }
            Op::Sub { a, b } => {
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let so = self.nodes[idx].shape.clone();
                let da = kernels::reduce_to_shape(&d_out, &so, &sa);
                self.acc_grad(a, &da);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                let db = kernels::reduce_to_shape(&neg, &so, &sb);
                self.acc_grad(b, &db);
            }
            Op::Mul { a, b } => {
                let so = self.nodes[idx].shape.clone();
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                if self.nodes[a].requires_grad {
                    let (prod, _) = kernels::broadcast_binary(
                        &d_out, &so, &self.nodes[b].data, &sb, |g, y| g * y).expect("forward validated");
                    let da = kernels::reduce_to_shape(&prod, &so, &sa);
                    self.acc_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let (prod, _) = kernels::broadcast_binary(
                        &d_out, &so, &self.nodes[a].data, &sa, |g, x| g * x).expect("forward validated");
                    let db = kernels::reduce_to_shape(&prod, &so, &sb);
                    self.acc_grad(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = d_out.iter().map(|v| v * c).collect();
                self.acc_grad(x, &dx);
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[idx].data;
                let dx: Vec<f64> = d_out.iter().zip(out.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_grad(x, &dx);
            }
            Op::Relu { x } => {
                let src = &self.nodes[x].data;
                let dx: Vec<f64> = d_out.iter().zip(src.iter()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.acc_grad(x, &dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[idx].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&shape, axis);
                let y = &self.nodes[idx].data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += d_out[at(a)] * y[at(a)];
                        }
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (d_out[at(a)] - dot);
                        }
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.nodes[idx].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&shape, axis);
                let y = &self.nodes[idx].data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut sum = 0.0;
                        for a in 0..len {
                            sum += d_out[at(a)];
                        }
                        for a in 0..len {
                            dx[at(a)] = d_out[at(a)] - y[at(a)].exp() * sum;
                        }
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::TopVSoftmax { x, v, selected } => {
                let shape = self.nodes[idx].shape.clone();
                let len = *shape.last().unwrap();
                let rows = self.nodes[idx].data.len() / len;
                let y = &self.nodes[idx].data;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let sel = &selected[r * v..(r + 1) * v];
                    let mut dot = 0.0;
                    for &i in sel {
                        let at = r * len + i as usize;
                        dot += d_out[at] * y[at];
                    }
                    for &i in sel {
                        let at = r * len + i as usize;
                        dx[at] = y[at] * (d_out[at] - dot);
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::SumAxis { x, axis } => {
                let in_shape = self.nodes[x].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&in_shape, axis);
                let mut dx = vec![0.0; self.nodes[x].data.len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = d_out[o * inner + i];
                        }
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![d_out[0]; self.nodes[x].data.len()];
                self.acc_grad(x, &dx);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&d_out, &self.nodes[b].data, &mut da, m, n, k);
                    self.acc_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&self.nodes[a].data, &d_out, &mut db, k, m, n);
                    self.acc_grad(b, &db);
                }
            }
            Op::Transpose2 { x } => {
                let (n, m) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = d_out[i * m + j];
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::Reshape { x } => {
                self.acc_grad(x, &d_out);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                let (outer, total, inner) = kernels::axis_split(&out_shape, axis);
                let mut offset = 0usize;
                for xi in xs {
                    let len = self.nodes[xi].shape[axis];
                    if self.nodes[xi].requires_grad {
                        let mut dx = vec![0.0; self.nodes[xi].data.len()];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            dx[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&d_out[src_start..src_start + len * inner]);
                        }
                        self.acc_grad(xi, &dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.nodes[x].shape.clone();
                let (outer, full, inner) = kernels::axis_split(&in_shape, axis);
                let len = self.nodes[idx].shape[axis];
                let mut dx = vec![0.0; self.nodes[x].data.len()];
                for o in 0..outer {
                    let dst_start = (o * full + start) * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&d_out[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc_grad(x, &dx);
            }
            Op::SelectCols { x, cols } => {
                let n = self.nodes[x].shape[1];
                let m = self.nodes[x].shape[0];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for (j, &c) in cols.iter().enumerate() {
                        dx[i * n + c] += d_out[i * cols.len() + j];
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::Conv2d { input, kernel, bias, stride, padding, groups } => {
                let d = kernels::conv2d_dims(
                    &self.nodes[input].shape,
                    &self.nodes[kernel].shape,
                    stride,
                    padding,
                    groups,
                )
                .expect("forward validated");
                let grads = kernels::conv2d_backward(
                    &d_out,
                    &self.nodes[input].data,
                    &self.nodes[kernel].data,
                    bias.is_some(),
                    &d,
                );
                self.acc_grad(input, &grads.d_input);
                self.acc_grad(kernel, &grads.d_kernel);
                if let (Some(b), Some(db)) = (bias, grads.d_bias) {
                    self.acc_grad(b, &db);
                }
            }
            Op::Conv1dChannel { x, kernel } => {
                let (b, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let k = self.nodes[kernel].shape[0];
                let pad = (k - 1) / 2;
                if self.nodes[x].requires_grad {
                    let w = &self.nodes[kernel].data;
                    let mut dx = vec![0.0; b * c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let g = d_out[bi * c + ci];
                            for j in 0..k {
                                let p = ci as isize + j as isize - pad as isize;
                                if p >= 0 && (p as usize) < c {
                                    dx[bi * c + p as usize] += w[j] * g;
                                }
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.nodes[kernel].requires_grad {
                    let src = &self.nodes[x].data;
                    let mut dw = vec![0.0; k];
                    for bi in 0..b {
                        for ci in 0..c {
                            let g = d_out[bi * c + ci];
                            for (j, dwj) in dw.iter_mut().enumerate() {
                                let p = ci as isize + j as isize - pad as isize;
                                if p >= 0 && (p as usize) < c {
                                    *dwj += src[bi * c + p as usize] * g;
                                }
                            }
                        }
                    }
                    self.acc_grad(kernel, &dw);
                }
            }
            Op::DwConvSeq { x, kernel, bias } => {
                let (l, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let k = self.nodes[kernel].shape[1];
                let pad = (k - 1) / 2;
                if self.nodes[x].requires_grad {
                    let w = &self.nodes[kernel].data;
                    let mut dx = vec![0.0; l * c];
                    for li in 0..l {
                        for ci in 0..c {
                            let g = d_out[li * c + ci];
                            for j in 0..k {
                                let p = li as isize + j as isize - pad as isize;
                                if p >= 0 && (p as usize) < l {
                                    dx[p as usize * c + ci] += w[ci * k + j] * g;
                                }
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.nodes[kernel].requires_grad {
                    let src = &self.nodes[x].data;
                    let mut dw = vec![0.0; c * k];
                    for li in 0..l {
                        for ci in 0..c {
                            let g = d_out[li * c + ci];
                            for j in 0..k {
                                let p = li as isize + j as isize - pad as isize;
                                if p >= 0 && (p as usize) < l {
                                    dw[ci * k + j] += src[p as usize * c + ci] * g;
                                }
                            }
                        }
                    }
                    self.acc_grad(kernel, &dw);
                }
                if let Some(bi) = bias {
                    if self.nodes[bi].requires_grad {
                        let mut db = vec![0.0; c];
                        for li in 0..l {
                            for ci in 0..c {
                                db[ci] += d_out[li * c + ci];
                            }
                        }
                        self.acc_grad(bi, &db);
                    }
                }
            }
            Op::AvgPoolGlobal { x } => {
                let s = &self.nodes[x].shape;
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; b * c * plane];
                let inv = 1.0 / plane as f64;
                for i in 0..b * c {
                    let g = d_out[i] * inv;
                    for v in dx[i * plane..(i + 1) * plane].iter_mut() {
                        *v = g;
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::MaxPoolGlobal { x, argmax } => {
                let s = &self.nodes[x].shape;
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; b * c * plane];
                for i in 0..b * c {
                    dx[i * plane + argmax[i] as usize] = d_out[i];
                }
                self.acc_grad(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = *self.nodes[idx].shape.last().unwrap();
                let rows = self.nodes[idx].data.len() / dim;
                let g = &self.nodes[gamma].data;
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0; rows * dim];
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..dim {
                            let dxh = d_out[r * dim + j] * g[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * dim + j];
                        }
                        let inv = 1.0 / dim as f64;
                        for j in 0..dim {
                            let dxh = d_out[r * dim + j] * g[j];
                            dx[r * dim + j] = rstd[r]
                                * (dxh - sum_dxhat * inv - xhat[r * dim + j] * sum_dxhat_xhat * inv);
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.nodes[gamma].requires_grad {
                    let mut dg = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            dg[j] += d_out[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                    self.acc_grad(gamma, &dg);
                }
                if self.nodes[beta].requires_grad {
                    let mut db = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            db[j] += d_out[r * dim + j];
                        }
                    }
                    self.acc_grad(beta, &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let s = self.nodes[idx].shape.clone();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let n = (b * plane) as f64;
                let g = &self.nodes[gamma].data;
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    for ci in 0..c {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        if train {
                            for bi in 0..b {
                                let base = (bi * c + ci) * plane;
                                for j in 0..plane {
                                    let dxh = d_out[base + j] * g[ci];
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * xhat[base + j];
                                }
                            }
                        }
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                let dxh = d_out[base + j] * g[ci];
                                dx[base + j] = if train {
                                    rstd[ci] * (dxh - sum_dxhat / n - xhat[base + j] * sum_dxhat_xhat / n)
                                } else {
                                    dxh * rstd[ci]
                                };
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.nodes[gamma].requires_grad {
                    let mut dg = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                dg[ci] += d_out[base + j] * xhat[base + j];
                            }
                        }
                    }
                    self.acc_grad(gamma, &dg);
                }
                if self.nodes[beta].requires_grad {
                    let mut db = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                db[ci] += d_out[base + j];
                            }
                        }
                    }
                    self.acc_grad(beta, &db);
                }
            }
            Op::CropResize { images, crops, out_h, out_w } => {
                if self.nodes[images].requires_grad {
                    let shape = self.nodes[images].shape.clone();
                    let dx = kernels::crop_resize_backward(&d_out, &shape, &crops, out_h, out_w);
                    self.acc_grad(images, &dx);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── parameter store ───────────────────────────────────────────────────

/// Stable identifier of a stored parameter or buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the main optimizer.
    Main,
    /// Trained by the auxiliary classifiers' own constant-rate optimizer.
    Aux,
    /// Not trained (batch-norm running statistics).
    Buffer,
}

pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
    init: Init,
    reinit_count: u64,
}

/// Owns every long-lived array of a model: trainable weights and
/// non-trainable buffers, each initialized from a deterministic stream
/// derived from (store seed, parameter name, re-init count).
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let numel = shape.iter().product();
        let mut rng = derive_rng(self.seed, &[fnv1a(name.as_bytes()), 0]);
        let data = init_values(init, numel, &mut rng);
        self.params.push(Param { name, shape: shape.to_vec(), data, kind, init, reinit_count: 0 });
        ParamId(self.params.len() - 1)
    }

    /// Redraw a parameter from a fresh seed stream (same scheme, next
    /// stream), as the auxiliary classifiers do every δ epochs.
    pub fn reinit(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.reinit_count += 1;
        let mut rng = derive_rng(self.seed, &[fnv1a(p.name.as_bytes()), p.reinit_count]);
        p.data = init_values(p.init, p.data.len(), &mut rng);
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.data.len())
            .sum()
    }
}
