//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] owns every tensor produced during a computation. Operations
//! append a node (value plus the op that produced it) and return a [`NodeId`]
//! handle. [`Tape::backward`] replays the recorded ops in reverse and
//! accumulates gradients into the nodes; gradients add across backward calls
//! until [`Tape::zero_grad`] clears them.
//!
//! Inference runs on a tape built with [`Tape::inference`]: the same kernels
//! execute (so forward values are bit-identical to a recording tape), but
//! backward payloads are not kept and `backward` is rejected.
//!
//! # FLOP accounting
//!
//! Every op charges a documented forward-cost estimate to the tape's FLOP
//! counter as it executes: one FLOP per add/sub/mul/div/compare, four per
//! transcendental call (`exp`, `ln`, `tanh`, `sqrt`). Copies (gather, slice)
//! are free. Backward passes are not charged; the counter is an inference
//! cost meter.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    /// True when this node's gradient is needed (a gradient-requiring leaf,
    /// or any input transitively needs one).
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    BiasAdd { x: usize, bias: usize },
    Scale { x: usize, factor: f64 },
    Sum { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Softmax { x: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    MaskedAttention {
        q: usize,
        k: usize,
        v: usize,
        n_train: usize,
        n_heads: usize,
        /// Attention weights `[n_heads * t * t]`, saved for backward; empty on
        /// inference tapes.
        probs: Vec<f64>,
    },
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

/// Append-only autodiff tape; see the module docs.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grad_enabled: bool,
    flops: u64,
}

const LN_EPS: f64 = 1e-5;
const GELU_CUBIC: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `[m x k] . [k x n]`, accumulating along `k` in index order. The loop is
/// ordered i-k-j so the inner loop streams both operands.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_val) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o += a_val * b_val;
            }
        }
    }
    out
}

/// `[m x k] . [n x k]^T -> [m x n]`.
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[m x k]^T . [m x n] -> [k x n]`.
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_val) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o += a_val * b_val;
            }
        }
    }
    out
}

/// Row-wise stabilized softmax.
pub(crate) fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &z) in out_row.iter_mut().zip(row) {
            *o = (z - max).exp();
            denom += *o;
        }
        for o in out_row.iter_mut() {
            *o /= denom;
        }
    }
    out
}

struct AttentionOut {
    out: Vec<f64>,
    probs: Vec<f64>,
    flops: u64,
}

/// Masked multi-head attention over row tokens.
///
/// Layout: rows `0..n_train` are context tokens, rows `n_train..t` are query
/// tokens. Context tokens attend to all context tokens; query tokens attend
/// to context tokens plus themselves, never to each other.
///
/// Reductions over the attended set (softmax denominator and the weighted
/// value sums) run in a canonical order: attended indices sorted by score,
/// ties broken by the attended row's value slice. Two rows that tie on both
/// contribute identical summands, so the reduction value is invariant, bit
/// for bit, under any permutation of the context rows.
#[allow(clippy::too_many_arguments)]
fn attention_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    n_train: usize,
    n_heads: usize,
    save_probs: bool,
) -> AttentionOut {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = if save_probs {
        vec![0.0; n_heads * t * t]
    } else {
        Vec::new()
    };
    let mut flops: u64 = 0;
    let mut scores = vec![0.0; t];
    let mut order: Vec<usize> = Vec::with_capacity(n_train + 1);

    for head in 0..n_heads {
        let off = head * dh;
        for i in 0..t {
            order.clear();
            order.extend(0..n_train);
            if i >= n_train {
                order.push(i);
            }
            let q_row = &q[i * d + off..i * d + off + dh];
            for &j in &order {
                let k_row = &k[j * d + off..j * d + off + dh];
                let dot: f64 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                scores[j] = dot * scale;
            }
            order.sort_unstable_by(|&x, &y| {
                scores[x].total_cmp(&scores[y]).then_with(|| {
                    let vx = &v[x * d + off..x * d + off + dh];
                    let vy = &v[y * d + off..y * d + off + dh];
                    for (a, b) in vx.iter().zip(vy) {
                        match a.total_cmp(b) {
                            Ordering::Equal => continue,
                            other => return other,
                        }
                    }
                    Ordering::Equal
                })
            });
            let max = order
                .iter()
                .map(|&j| scores[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &j in &order {
                scores[j] = (scores[j] - max).exp();
                denom += scores[j];
            }
            let out_row = &mut out[i * d + off..i * d + off + dh];
            for &j in &order {
                let p = scores[j] / denom;
                if save_probs {
                    probs[head * t * t + i * t + j] = p;
                }
                let v_row = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += p * vv;
                }
            }
            // Per attended row: a dh-element dot with scale (2dh + 1), the
            // stabilized exp path (~7), and the dh-element value update (2dh).
            flops += order.len() as u64 * (4 * dh as u64 + 8);
        }
    }
    AttentionOut { out, probs, flops }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    grad_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    n_train: usize,
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut attended: Vec<usize> = Vec::with_capacity(n_train + 1);

    for head in 0..n_heads {
        let off = head * dh;
        let p_head = &probs[head * t * t..(head + 1) * t * t];
        for i in 0..t {
            attended.clear();
            attended.extend(0..n_train);
            if i >= n_train {
                attended.push(i);
            }
            let g_row = &grad_out[i * d + off..i * d + off + dh];

            // dp_j = g . v_j, then ds_j = p_j (dp_j - sum_l p_l dp_l).
            let mut dp = vec![0.0; attended.len()];
            let mut weighted = 0.0;
            for (slot, &j) in attended.iter().enumerate() {
                let v_row = &v[j * d + off..j * d + off + dh];
                dp[slot] = g_row.iter().zip(v_row).map(|(a, b)| a * b).sum();
                weighted += p_head[i * t + j] * dp[slot];
            }
            for (slot, &j) in attended.iter().enumerate() {
                let p = p_head[i * t + j];
                let ds = p * (dp[slot] - weighted) * scale;
                let k_row = &k[j * d + off..j * d + off + dh];
                let q_row = &q[i * d + off..i * d + off + dh];
                for dd in 0..dh {
                    dq[i * d + off + dd] += ds * k_row[dd];
                    dk[j * d + off + dd] += ds * q_row[dd];
                    dv[j * d + off + dd] += p * g_row[dd];
                }
            }
        }
    }
    (dq, dk, dv)
}

impl Tape {
    /// Tape that records for backward.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
            flops: 0,
        }
    }

    /// Tape for inference: identical kernels, no backward support.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Forward FLOPs charged so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            grad: None,
        });
        self.ops.push(op);
        NodeId(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target; on inference tapes the flag is ignored.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Matrix product `[m x k] . [k x n] -> [m x n]`. Charges `2mkn` FLOPs.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape2(a, "matmul")?;
        let (kb, n) = self.shape2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.flops += 2 * (m * ka * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(data, vec![m, n]).expect("matmul output shape"),
            Op::MatMul { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.flops += data.len() as u64;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(data, shape).expect("add output shape"),
            Op::Add { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Adds a length-`c` bias vector to every row of an `[r x c]` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "bias_add")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension {
                op: "bias_add",
                lhs: vec![r, c],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        self.flops += data.len() as u64;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::new(data, vec![r, c]).expect("bias_add output shape"),
            Op::BiasAdd { x: x.0, bias: bias.0 },
            needs,
        ))
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NumericInput("scale"));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v * factor).collect();
        self.flops += data.len() as u64;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(data, shape).expect("scale output shape"),
            Op::Scale { x: x.0, factor },
            needs,
        ))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.flops += self.value(x).numel() as u64;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![total], vec![1]).expect("sum output shape"),
            Op::Sum { x: x.0 },
            needs,
        ))
    }

    /// Elementwise GELU (tanh approximation). Charges 12 FLOPs per element.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        self.flops += 12 * data.len() as u64;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(data, shape).expect("gelu output shape"),
            Op::Gelu { x: x.0 },
            needs,
        ))
    }

    /// Row-wise layer normalization with a learned gain and bias.
    ///
    /// Uses the biased variance and epsilon `1e-5` inside the square root.
    /// Charges `r * (7d + 12)` FLOPs.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, d) = self.shape2(x, "layer_norm")?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![r, d],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        if !self.value(x).is_finite() {
            return Err(Error::NumericInput("layer_norm"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * d];
        for row in 0..r {
            let xs = &xd[row * d..(row + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            let out = &mut data[row * d..(row + 1) * d];
            for i in 0..d {
                out[i] = (xs[i] - mean) * inv_std * g[i] + b[i];
            }
        }
        self.flops += (r * (7 * d + 12)) as u64;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(data, vec![r, d]).expect("layer_norm output shape"),
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 },
            needs,
        ))
    }

    /// Row-wise softmax with max-shift stabilization. Charges `8rk` FLOPs.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, k) = self.shape2(x, "softmax")?;
        if !self.value(x).is_finite() {
            return Err(Error::NumericInput("softmax"));
        }
        let data = softmax_rows(self.value(x).data(), r, k);
        self.flops += (8 * r * k) as u64;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(data, vec![r, k]).expect("softmax output shape"),
            Op::Softmax { x: x.0 },
            needs,
        ))
    }

    /// Copies rows of `table` at the given indices (an embedding lookup).
    /// Duplicate indices are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.shape2(table, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: vec![bad],
                rhs: vec![rows],
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(data, vec![indices.len(), d]).expect("gather_rows output shape"),
            Op::GatherRows { table: table.0, indices: indices.to_vec() },
            needs,
        ))
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![start, len],
                rhs: vec![r, c],
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(data, vec![len, c]).expect("slice_rows output shape"),
            Op::SliceRows { x: x.0, start },
            needs,
        ))
    }

    /// Contiguous column slice `[start, start + len)`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![start, len],
                rhs: vec![r, c],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(data, vec![r, len]).expect("slice_cols output shape"),
            Op::SliceCols { x: x.0, start },
            needs,
        ))
    }

    /// Masked multi-head attention; see [`attention_kernel`] for the mask and
    /// the canonical reduction order. `q`, `k`, `v` are `[t x d]` with
    /// `d % n_heads == 0` and `1 <= n_train <= t`.
    pub fn masked_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_train: usize,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (t, d) = self.shape2(q, "masked_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(Error::Dimension {
                    op: "masked_attention",
                    lhs: vec![t, d],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Contract(format!(
                "masked_attention: d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        if n_train == 0 || n_train > t {
            return Err(Error::Contract(format!(
                "masked_attention: n_train {n_train} outside 1..={t}"
            )));
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let save = self.grad_enabled;
        let result = attention_kernel(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            n_train,
            n_heads,
            save,
        );
        self.flops += result.flops;
        Ok(self.push(
            Tensor::new(result.out, vec![t, d]).expect("masked_attention output shape"),
            Op::MaskedAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                n_train,
                n_heads,
                probs: result.probs,
            },
            needs,
        ))
    }

    /// Mean cross-entropy between `[r x k]` logits and integer targets,
    /// computed via a stabilized log-sum-exp. Charges `r * (7k + 6)` FLOPs.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, k) = self.shape2(logits, "cross_entropy")?;
        if targets.len() != r || r == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![targets.len()],
                rhs: vec![r],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!(
                "cross_entropy: target class {bad} outside 0..{k}"
            )));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::NumericInput("cross_entropy"));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &target) in targets.iter().enumerate() {
            let z = &data[row * k..(row + 1) * k];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[target];
        }
        self.flops += (r * (7 * k + 6)) as u64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![total / r as f64], vec![1]).expect("cross_entropy output shape"),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Replays the tape in reverse from `loss`, accumulating gradients into
    /// every node that needs one. `loss` must be a single-element node on a
    /// recording tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract(
                "backward called on an inference tape".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if local[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = local.split_at_mut(i);
            let gout = tail[0].as_ref().expect("checked above");
            let mut add_to = |idx: usize, contribution: Vec<f64>| {
                if !self.nodes[idx].needs_grad {
                    return;
                }
                match &mut head[idx] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                    let nn = self.nodes[*b].value.cols();
                    if self.nodes[*a].needs_grad {
                        add_to(*a, matmul_nt_kernel(gout, bv, m, nn, k));
                    }
                    if self.nodes[*b].needs_grad {
                        add_to(*b, matmul_tn_kernel(av, gout, m, k, nn));
                    }
                }
                Op::Add { a, b } => {
                    add_to(*a, gout.clone());
                    add_to(*b, gout.clone());
                }
                Op::BiasAdd { x, bias } => {
                    let c = self.nodes[i].value.cols();
                    if self.nodes[*bias].needs_grad {
                        let mut db = vec![0.0; c];
                        for (idx, g) in gout.iter().enumerate() {
                            db[idx % c] += g;
                        }
                        add_to(*bias, db);
                    }
                    add_to(*x, gout.clone());
                }
                Op::Scale { x, factor } => {
                    add_to(*x, gout.iter().map(|g| g * factor).collect());
                }
                Op::Sum { x } => {
                    let g = gout[0];
                    add_to(*x, vec![g; self.nodes[*x].value.numel()]);
                }
                Op::Gelu { x } => {
                    let xs = self.nodes[*x].value.data();
                    add_to(
                        *x,
                        gout.iter()
                            .zip(xs)
                            .map(|(g, &v)| g * gelu_derivative(v))
                            .collect(),
                    );
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (r, d) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                    let xs = self.nodes[*x].value.data();
                    let g = self.nodes[*gain].value.data();
                    let mut dx = vec![0.0; r * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for row in 0..r {
                        let xr = &xs[row * d..(row + 1) * d];
                        let gr = &gout[row * d..(row + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; d];
                        let mut dxhat = vec![0.0; d];
                        for idx in 0..d {
                            xhat[idx] = (xr[idx] - mean) * inv_std;
                            dxhat[idx] = gr[idx] * g[idx];
                            sum_dxhat += dxhat[idx];
                            sum_dxhat_xhat += dxhat[idx] * xhat[idx];
                            dgain[idx] += gr[idx] * xhat[idx];
                            dbias[idx] += gr[idx];
                        }
                        let dr = &mut dx[row * d..(row + 1) * d];
                        for idx in 0..d {
                            dr[idx] = inv_std / d as f64
                                * (d as f64 * dxhat[idx]
                                    - sum_dxhat
                                    - xhat[idx] * sum_dxhat_xhat);
                        }
                    }
                    add_to(*x, dx);
                    add_to(*gain, dgain);
                    add_to(*bias, dbias);
                }
                Op::Softmax { x } => {
                    let (r, k) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let s = self.nodes[i].value.data();
                    let mut dx = vec![0.0; r * k];
                    for row in 0..r {
                        let sr = &s[row * k..(row + 1) * k];
                        let gr = &gout[row * k..(row + 1) * k];
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut dx[row * k..(row + 1) * k];
                        for idx in 0..k {
                            dr[idx] = sr[idx] * (gr[idx] - dot);
                        }
                    }
                    add_to(*x, dx);
                }
                Op::GatherRows { table, indices } => {
                    let d = self.nodes[i].value.cols();
                    let rows = self.nodes[*table].value.rows();
                    let mut dt = vec![0.0; rows * d];
                    for (slot, &idx) in indices.iter().enumerate() {
                        for c in 0..d {
                            dt[idx * d + c] += gout[slot * d + c];
                        }
                    }
                    add_to(*table, dt);
                }
                Op::SliceRows { x, start } => {
                    let c = self.nodes[i].value.cols();
                    let len = self.nodes[i].value.rows();
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    dx[start * c..(start + len) * c].copy_from_slice(gout);
                    add_to(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let src_cols = self.nodes[*x].value.cols();
                    let (r, len) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    for row in 0..r {
                        for c in 0..len {
                            dx[row * src_cols + start + c] = gout[row * len + c];
                        }
                    }
                    add_to(*x, dx);
                }
                Op::MaskedAttention { q, k, v, n_train, n_heads, probs } => {
                    let (t, d) = (self.nodes[*q].value.rows(), self.nodes[*q].value.cols());
                    let (dq, dk, dv) = attention_backward(
                        gout,
                        self.nodes[*q].value.data(),
                        self.nodes[*k].value.data(),
                        self.nodes[*v].value.data(),
                        probs,
                        t,
                        d,
                        *n_train,
                        *n_heads,
                    );
                    add_to(*q, dq);
                    add_to(*k, dk);
                    add_to(*v, dv);
                }
                Op::CrossEntropy { logits, targets } => {
                    let (r, k) = (
                        self.nodes[*logits].value.rows(),
                        self.nodes[*logits].value.cols(),
                    );
                    let probs = softmax_rows(self.nodes[*logits].value.data(), r, k);
                    let g = gout[0] / r as f64;
                    let mut dl = probs;
                    for (row, &target) in targets.iter().enumerate() {
                        dl[row * k + target] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= g;
                    }
                    add_to(*logits, dl);
                }
            }
        }

        for (i, maybe) in local.into_iter().enumerate() {
            let Some(fresh) = maybe else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, f) in acc.iter_mut().zip(&fresh) {
                        *a += f;
                    }
                }
                slot => *slot = Some(fresh),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use proptest::prelude::*;

    const FD_STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    const ABS_FLOOR: f64 = 1e-7;

    fn random_tensor(rng: &mut Pcg32, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.f64_in(-2.0, 2.0))
    }

    /// Records the graph once for analytic gradients, then re-evaluates it
    /// with perturbed inputs for central finite differences.
    fn check_gradients(params: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|p| t.leaf(p.clone(), true)).collect();
            let out = build(&mut t, &ids);
            t.scalar(out)
        };

        for (pi, param) in params.iter().enumerate() {
            let analytic = tape.grad(ids[pi]).expect("missing gradient").to_vec();
            for (e, &a) in analytic.iter().enumerate().take(param.numel()) {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[e] += FD_STEP;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[e] -= FD_STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < REL_TOL,
                    "param {pi} elem {e}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    fn triple_loop_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Pcg32::keyed(3, 1);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 4, 3), (7, 7, 7)] {
            let a = random_tensor(&mut rng, m, k);
            let b = random_tensor(&mut rng, k, n);
            let mut tape = Tape::new();
            let ia = tape.constant(a.clone());
            let ib = tape.constant(b.clone());
            let out = tape.matmul(ia, ib).unwrap();
            assert_eq!(tape.value(out).data(), triple_loop_matmul(&a, &b).as_slice());
        }
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let mut tape = Tape::new();
        let ia = tape.constant(a);
        let ib = tape.constant(b);
        let out = tape.matmul(ia, ib).unwrap();
        assert_eq!(tape.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    // Frozen against a 40-digit arbitrary-precision evaluation.
    #[test]
    fn softmax_and_gelu_match_high_precision_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1.0, 2.0, 3.0], vec![1, 3]).unwrap());
        let s = tape.softmax(x).unwrap();
        let got = tape.value(s).data();
        let expect = [
            0.09003057317038046,
            0.24472847105479765,
            0.6652409557748219,
        ];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }

        let g = tape.constant(Tensor::new(vec![1.0, 0.0], vec![1, 2]).unwrap());
        let y = tape.gelu(g).unwrap();
        assert!((tape.value(y).data()[0] - 0.8411919906082767).abs() < 1e-15);
        assert_eq!(tape.value(y).data()[1], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_is_stable() {
        let mut rng = Pcg32::keyed(9, 2);
        let x = random_tensor(&mut rng, 6, 5);
        let mut tape = Tape::new();
        let ix = tape.constant(x.clone());
        let s = tape.softmax(ix).unwrap();
        for r in 0..6 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for shift in [0.5, 3.0, -7.0] {
            let shifted = Tensor::from_fn(6, 5, |r, c| x.at(r, c) + shift);
            let is = tape.constant(shifted);
            let ss = tape.softmax(is).unwrap();
            for (a, b) in tape.value(s).data().iter().zip(tape.value(ss).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_each_row() {
        let mut rng = Pcg32::keyed(4, 8);
        let x = random_tensor(&mut rng, 4, 16);
        let mut tape = Tape::new();
        let ix = tape.constant(x);
        let gain = tape.constant(Tensor::filled(vec![16], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![16]));
        let y = tape.layer_norm(ix, gain, bias).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn finite_differences_agree_for_dense_ops() {
        let mut rng = Pcg32::keyed(10, 0);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        check_gradients(&[a, b], |t, ids| {
            let m = t.matmul(ids[0], ids[1]).unwrap();
            t.sum(m).unwrap()
        });

        let x = random_tensor(&mut rng, 3, 5);
        let y = random_tensor(&mut rng, 3, 5);
        let bias = Tensor::from_fn(1, 5, |_, c| 0.3 * c as f64);
        check_gradients(&[x, y, Tensor::vector(bias.into_data())], |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let s = t.bias_add(s, ids[2]).unwrap();
            let s = t.scale(s, 0.7).unwrap();
            let g = t.gelu(s).unwrap();
            t.sum(g).unwrap()
        });
    }

    #[test]
    fn finite_differences_agree_for_layer_norm() {
        let mut rng = Pcg32::keyed(10, 1);
        let x = random_tensor(&mut rng, 4, 6);
        let gain = Tensor::vector((0..6).map(|i| 0.5 + 0.1 * i as f64).collect());
        let bias = Tensor::vector((0..6).map(|i| -0.2 + 0.05 * i as f64).collect());
        check_gradients(&[x, gain, bias], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            let g = t.gelu(y).unwrap();
            t.sum(g).unwrap()
        });
    }

    #[test]
    fn finite_differences_agree_for_softmax_and_slices() {
        let mut rng = Pcg32::keyed(10, 2);
        let x = random_tensor(&mut rng, 4, 5);
        check_gradients(&[x], |t, ids| {
            let s = t.softmax(ids[0]).unwrap();
            let col = t.slice_cols(s, 1, 2).unwrap();
            let row = t.slice_rows(col, 0, 3).unwrap();
            t.sum(row).unwrap()
        });
    }

    #[test]
    fn finite_differences_agree_for_gather_with_duplicates() {
        let mut rng = Pcg32::keyed(10, 3);
        let table = random_tensor(&mut rng, 4, 3);
        check_gradients(&[table], |t, ids| {
            let g = t.gather_rows(ids[0], &[0, 2, 0, 3]).unwrap();
            let a = t.gelu(g).unwrap();
            t.sum(a).unwrap()
        });
    }

    #[test]
    fn finite_differences_agree_for_masked_attention() {
        let mut rng = Pcg32::keyed(10, 4);
        let q = random_tensor(&mut rng, 5, 4);
        let k = random_tensor(&mut rng, 5, 4);
        let v = random_tensor(&mut rng, 5, 4);
        check_gradients(&[q, k, v], |t, ids| {
            let a = t.masked_attention(ids[0], ids[1], ids[2], 3, 2).unwrap();
            let test_rows = t.slice_rows(a, 3, 2).unwrap();
            let g = t.gelu(test_rows).unwrap();
            t.sum(g).unwrap()
        });
    }

    #[test]
    fn finite_differences_agree_for_cross_entropy() {
        let mut rng = Pcg32::keyed(10, 5);
        let logits = random_tensor(&mut rng, 4, 3);
        check_gradients(&[logits], |t, ids| {
            t.cross_entropy(ids[0], &[0, 2, 1, 1]).unwrap()
        });
    }

    #[test]
    fn cross_entropy_matches_manual_values() {
        // Uniform logits over 4 classes: loss = ln 4 for every row.
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 4]));
        let loss = tape.cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-15);
    }

    fn dense_attention_reference(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        n_train: usize,
        n_heads: usize,
    ) -> Vec<f64> {
        let (t, d) = (q.rows(), q.cols());
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; t * d];
        for head in 0..n_heads {
            let off = head * dh;
            for i in 0..t {
                let mut allowed: Vec<usize> = (0..n_train).collect();
                if i >= n_train {
                    allowed.push(i);
                }
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|c| q.at(i, off + c) * k.at(j, off + c))
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for (slot, &j) in allowed.iter().enumerate() {
                    let p = exps[slot] / denom;
                    for c in 0..dh {
                        out[i * d + off + c] += p * v.at(j, off + c);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_reference() {
        let mut rng = Pcg32::keyed(12, 0);
        for &(t_rows, d, n_train, heads) in &[(4, 2, 2, 1), (6, 8, 3, 2), (7, 12, 5, 4)] {
            let q = random_tensor(&mut rng, t_rows, d);
            let k = random_tensor(&mut rng, t_rows, d);
            let v = random_tensor(&mut rng, t_rows, d);
            let mut tape = Tape::new();
            let iq = tape.constant(q.clone());
            let ik = tape.constant(k.clone());
            let iv = tape.constant(v.clone());
            let out = tape.masked_attention(iq, ik, iv, n_train, heads).unwrap();
            let reference = dense_attention_reference(&q, &k, &v, n_train, heads);
            for (g, e) in tape.value(out).data().iter().zip(&reference) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn attention_context_rows_never_see_query_rows() {
        let mut rng = Pcg32::keyed(12, 1);
        let q = random_tensor(&mut rng, 6, 4);
        let k = random_tensor(&mut rng, 6, 4);
        let v = random_tensor(&mut rng, 6, 4);

        let run = |q: &Tensor, k: &Tensor, v: &Tensor| -> Vec<f64> {
            let mut tape = Tape::inference();
            let iq = tape.constant(q.clone());
            let ik = tape.constant(k.clone());
            let iv = tape.constant(v.clone());
            let out = tape.masked_attention(iq, ik, iv, 3, 2).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&q, &k, &v);

        // Rewriting query row 4 must leave every other row's output untouched.
        let mut q2 = q.clone();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..4 {
            q2.data_mut()[4 * 4 + c] = 9.0 + c as f64;
            k2.data_mut()[4 * 4 + c] = -3.0 * c as f64;
            v2.data_mut()[4 * 4 + c] = 0.25 * c as f64;
        }
        let changed = run(&q2, &k2, &v2);
        for row in [0, 1, 2, 3, 5] {
            assert_eq!(
                base[row * 4..(row + 1) * 4].to_vec(),
                changed[row * 4..(row + 1) * 4].to_vec(),
                "row {row} leaked"
            );
        }
        assert_ne!(base[4 * 4..5 * 4].to_vec(), changed[4 * 4..5 * 4].to_vec());
    }

    #[test]
    fn attention_is_bit_exact_under_context_permutation() {
        let mut rng = Pcg32::keyed(12, 2);
        let t_rows = 7;
        let d = 8;
        let n_train = 4;
        let q = random_tensor(&mut rng, t_rows, d);
        let k = random_tensor(&mut rng, t_rows, d);
        let v = random_tensor(&mut rng, t_rows, d);

        let permute = |t: &Tensor, perm: &[usize]| {
            Tensor::from_fn(t_rows, d, |r, c| {
                if r < n_train {
                    t.at(perm[r], c)
                } else {
                    t.at(r, c)
                }
            })
        };
        let run = |q: &Tensor, k: &Tensor, v: &Tensor| -> Vec<f64> {
            let mut tape = Tape::inference();
            let iq = tape.constant(q.clone());
            let ik = tape.constant(k.clone());
            let iv = tape.constant(v.clone());
            let out = tape.masked_attention(iq, ik, iv, n_train, 2).unwrap();
            tape.value(out).data().to_vec()
        };

        let base = run(&q, &k, &v);
        for perm in [[1, 0, 3, 2], [3, 2, 1, 0], [2, 0, 3, 1]] {
            let got = run(&permute(&q, &perm), &permute(&k, &perm), &permute(&v, &perm));
            // Query rows are bit-identical; context row i moved to slot p.
            for row in n_train..t_rows {
                assert_eq!(
                    base[row * d..(row + 1) * d],
                    got[row * d..(row + 1) * d],
                    "query row {row} changed under {perm:?}"
                );
            }
            for (slot, &src) in perm.iter().enumerate() {
                assert_eq!(
                    base[src * d..(src + 1) * d],
                    got[slot * d..(slot + 1) * d],
                    "context row {src} changed under {perm:?}"
                );
            }
        }
    }

    #[test]
    fn inference_tape_reproduces_forward_bit_for_bit_and_rejects_backward() {
        let mut rng = Pcg32::keyed(13, 0);
        let x = random_tensor(&mut rng, 5, 6);
        let w = random_tensor(&mut rng, 6, 4);

        let run = |mut tape: Tape| -> (Vec<f64>, Tape, NodeId) {
            let ix = tape.leaf(x.clone(), true);
            let iw = tape.leaf(w.clone(), true);
            let m = tape.matmul(ix, iw).unwrap();
            let g = tape.gelu(m).unwrap();
            let s = tape.softmax(g).unwrap();
            let out = tape.sum(s).unwrap();
            (tape.value(s).data().to_vec(), tape, out)
        };
        let (train_vals, _, _) = run(Tape::new());
        let (infer_vals, mut infer_tape, out) = run(Tape::inference());
        assert_eq!(train_vals, infer_vals);
        let err = infer_tape.backward(out).unwrap_err();
        assert!(err.to_string().contains("inference"));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::new(vec![1.0, -2.0, 0.5], vec![1, 3]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.leaf(x, true);
        let s = tape.scale(ix, 2.0).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ix).unwrap(), &[2.0, 2.0, 2.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ix).unwrap(), &[4.0, 4.0, 4.0]);
        tape.zero_grad();
        assert!(tape.grad(ix).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ix).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(vec![2, 2], 1.0), true);
        let b = tape.constant(Tensor::filled(vec![2, 2], 3.0));
        let m = tape.matmul(a, b).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn flop_counter_matches_documented_charges() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::filled(vec![3, 4], 1.0));
        let b = tape.constant(Tensor::filled(vec![4, 5], 1.0));
        assert_eq!(tape.flops(), 0);
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5);

        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::filled(vec![6, 8], 0.5));
        let (n_train, heads, dh) = (4usize, 2usize, 4u64);
        tape.masked_attention(q, q, q, n_train, heads).unwrap();
        // Context rows attend to n_train rows, query rows to n_train + 1.
        let pairs = (4 * 4 + 2 * 5) as u64;
        assert_eq!(tape.flops(), heads as u64 * pairs * (4 * dh + 8));
    }

    #[test]
    fn shape_and_input_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Dimension { op: "matmul", .. })
        ));

        let bad = tape.constant(Tensor::new(vec![f64::NAN, 1.0], vec![1, 2]).unwrap());
        assert!(matches!(tape.softmax(bad), Err(Error::NumericInput("softmax"))));
        assert!(matches!(
            tape.cross_entropy(a, &[0, 5]),
            Err(Error::Contract(_))
        ));
        assert!(tape.slice_rows(a, 1, 5).is_err());
        assert!(tape.slice_cols(a, 3, 1).is_err());
        assert!(tape.gather_rows(a, &[7]).is_err());
        assert!(tape.masked_attention(a, a, a, 1, 2).is_err());
        assert!(tape.masked_attention(a, a, a, 0, 1).is_err());
        let scalar_err = tape.backward(a).unwrap_err();
        assert!(scalar_err.to_string().contains("scalar"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_softmax_rows_are_distributions(
            rows in 1usize..5,
            cols in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = Pcg32::keyed(seed, 77);
            let x = random_tensor(&mut rng, rows, cols);
            let mut tape = Tape::inference();
            let ix = tape.constant(x);
            let s = tape.softmax(ix).unwrap();
            for r in 0..rows {
                let row = tape.value(s).row(r);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_matmul_matches_oracle(
            m in 1usize..6,
            k in 1usize..6,
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = Pcg32::keyed(seed, 78);
            let a = random_tensor(&mut rng, m, k);
            let b = random_tensor(&mut rng, k, n);
            let mut tape = Tape::inference();
            let ia = tape.constant(a.clone());
            let ib = tape.constant(b.clone());
            let out = tape.matmul(ia, ib).unwrap();
            let oracle = triple_loop_matmul(&a, &b);
            prop_assert_eq!(tape.value(out).data(), oracle.as_slice());
        }
    }
}
