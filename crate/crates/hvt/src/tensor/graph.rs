//! The computation tape: recorded operations and their backward rules.

use super::{exact_sqrt, pooled_length, Tensor, TensorError, TensorResult};
use crate::rng::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Window geometry shared by the token-axis pooling operations.
#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    MeanRows { x: NodeId },
    Sum { x: NodeId },
    /// 1D max pool along the token (row) axis; `argmax` holds the winning
    /// input row per (output row, channel), captured at forward time.
    MaxPoolTokens { x: NodeId, argmax: Vec<usize> },
    AvgPoolTokens { x: NodeId, geom: PoolGeom },
    /// Strided dense convolution along the token axis, zero padded.
    ConvTokens { x: NodeId, weight: NodeId, bias: NodeId, geom: PoolGeom },
    /// 2D max pool over the √n×√n token grid, flattened row-major.
    MaxPoolTokens2d { x: NodeId, argmax: Vec<usize> },
    /// Inverted dropout; mask entries are 0 or 1/keep.
    Dropout { x: NodeId, mask: Vec<f64> },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    tensor: Tensor,
}

/// Append-only tape of recorded operations. Topological order is creation
/// order; `backward` traverses in strict reverse creation order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += aip * bv;
            }
        }
    }
}

/// Exact standard-normal CDF.
fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Standard-normal density.
fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Leaves with `requires_grad` receive
    /// gradients from `backward`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorResult<NodeId> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(tensor, Op::Leaf))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Clone the value (without graph linkage) out of the tape.
    pub fn detach(&self, id: NodeId) -> Tensor {
        let t = &self.nodes[id.0].tensor;
        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor in graph")
    }

    fn push(&mut self, mut tensor: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        tensor.set_node(id);
        self.nodes.push(Node { op, tensor });
        id
    }

    fn push_op(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, operands: &[NodeId]) -> TensorResult<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires = operands.iter().any(|&o| self.nodes[o.0].tensor.requires_grad());
        let tensor = Tensor::new(shape, data)?.with_requires_grad(requires);
        Ok(self.push(tensor, op))
    }

    fn matrix(&self, op: &'static str, id: NodeId) -> TensorResult<(usize, usize)> {
        let t = &self.nodes[id.0].tensor;
        if t.shape().len() != 2 {
            return Err(TensorError::NotAMatrix { op, shape: t.shape().to_vec() });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Standard matrix product (m×k)·(k×n) → m×n.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (m, ka) = self.matrix("matmul", a)?;
        let (kb, n) = self.matrix("matmul", b)?;
        if ka != kb {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, ka, n, &mut out);
        self.push_op("matmul", vec![m, n], out, Op::Matmul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push_op("transpose", vec![c, r], out, Op::Transpose { x }, &[x])
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (sa, sb) = (self.nodes[a.0].tensor.shape().to_vec(), self.nodes[b.0].tensor.shape().to_vec());
        if sa != sb {
            return Err(TensorError::DimensionMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push_op("add", sa, out, Op::Add { a, b }, &[a, b])
    }

    /// Add a length-c bias vector to every row of an r×c matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("add_bias", x)?;
        let bt = &self.nodes[bias.0].tensor;
        if bt.numel() != c {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: bt.shape().to_vec(),
            });
        }
        let b = self.data(bias);
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(x).chunks_exact(c) {
            out.extend(row.iter().zip(b).map(|(v, bv)| v + bv));
        }
        self.push_op("add_bias", vec![r, c], out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (sa, sb) = (self.nodes[a.0].tensor.shape().to_vec(), self.nodes[b.0].tensor.shape().to_vec());
        if sa != sb {
            return Err(TensorError::DimensionMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push_op("mul", sa, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> TensorResult<NodeId> {
        let shape = self.nodes[x.0].tensor.shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        self.push_op("scale", shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Exact GELU: x·Φ(x) with Φ the erf-based standard-normal CDF.
    pub fn gelu(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let shape = self.nodes[x.0].tensor.shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * norm_cdf(v)).collect();
        self.push_op("gelu", shape, out, Op::Gelu { x }, &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("softmax_rows", x)?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(x).chunks_exact(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        self.push_op("softmax_rows", vec![r, c], out, Op::SoftmaxRows { x }, &[x])
    }

    /// Per-row mean/variance normalization over the last axis, then affine
    /// gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("layer_norm", x)?;
        let (gt, bt) = (&self.nodes[gamma.0].tensor, &self.nodes[beta.0].tensor);
        if gt.numel() != c || bt.numel() != c {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: gt.shape().to_vec(),
            });
        }
        let (g, b) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(x).chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        self.push_op("layer_norm", vec![r, c], out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta])
    }

    /// Rows start..start+len as a new matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("slice_rows", x)?;
        if start + len > r || len == 0 {
            return Err(TensorError::IndexOutOfBounds { op: "slice_rows", index: start + len, bound: r });
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        self.push_op("slice_rows", vec![len, c], out, Op::SliceRows { x, start }, &[x])
    }

    /// Columns start..start+len as a new matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("slice_cols", x)?;
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfBounds { op: "slice_cols", index: start + len, bound: c });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push_op("slice_cols", vec![r, len], out, Op::SliceCols { x, start }, &[x])
    }

    /// Stack matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> TensorResult<NodeId> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat { op: "concat_rows" })?;
        let (_, c) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.matrix("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        self.push_op("concat_rows", vec![rows, c], out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> TensorResult<NodeId> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat { op: "concat_cols" })?;
        let (r, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix("concat_cols", p)?;
            if pr != r {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: vec![r, total],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.data(p);
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        self.push_op("concat_cols", vec![r, total], out, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    /// Column-wise mean over rows: r×c → 1×c.
    pub fn mean_rows(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (r, c) = self.matrix("mean_rows", x)?;
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push_op("mean_rows", vec![1, c], out, Op::MeanRows { x }, &[x])
    }

    /// Sum of all elements as a 1×1 scalar.
    pub fn sum(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let total: f64 = self.data(x).iter().sum();
        self.push_op("sum", vec![1, 1], vec![total], Op::Sum { x }, &[x])
    }

    /// 1D max pooling along the token axis, per channel; out-of-range
    /// positions count as −∞ and never win.
    pub fn max_pool_tokens(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> TensorResult<NodeId> {
        let (n, c) = self.matrix("max_pool_tokens", x)?;
        let out_len = pooled_length(n, kernel, stride, pad)?;
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; out_len * c];
        let mut argmax = vec![usize::MAX; out_len * c];
        for i in 0..out_len {
            for j in 0..kernel {
                let pos = (i * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                let row = pos as usize;
                for ch in 0..c {
                    let v = src[row * c + ch];
                    if v > out[i * c + ch] {
                        out[i * c + ch] = v;
                        argmax[i * c + ch] = row;
                    }
                }
            }
        }
        self.push_op("max_pool_tokens", vec![out_len, c], out, Op::MaxPoolTokens { x, argmax }, &[x])
    }

    /// 1D average pooling along the token axis; padded positions are
    /// excluded from the divisor.
    pub fn avg_pool_tokens(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> TensorResult<NodeId> {
        let (n, c) = self.matrix("avg_pool_tokens", x)?;
        let out_len = pooled_length(n, kernel, stride, pad)?;
        let src = self.data(x);
        let mut out = vec![0.0; out_len * c];
        for i in 0..out_len {
            let mut count = 0usize;
            for j in 0..kernel {
                let pos = (i * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                count += 1;
                let row = pos as usize;
                for ch in 0..c {
                    out[i * c + ch] += src[row * c + ch];
                }
            }
            for ch in 0..c {
                out[i * c + ch] /= count as f64;
            }
        }
        let geom = PoolGeom { kernel, stride, pad };
        self.push_op("avg_pool_tokens", vec![out_len, c], out, Op::AvgPoolTokens { x, geom }, &[x])
    }

    /// Strided convolution along the token axis. `weight` is (kernel·c_in)×c_out
    /// with row j·c_in+a holding the tap for window offset j, input channel a;
    /// out-of-range positions contribute zero.
    pub fn conv_tokens(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> TensorResult<NodeId> {
        let (n, c_in) = self.matrix("conv_tokens", x)?;
        let (wr, c_out) = self.matrix("conv_tokens", weight)?;
        if wr != kernel * c_in {
            return Err(TensorError::DimensionMismatch {
                op: "conv_tokens",
                lhs: vec![kernel * c_in, c_out],
                rhs: vec![wr, c_out],
            });
        }
        if self.nodes[bias.0].tensor.numel() != c_out {
            return Err(TensorError::DimensionMismatch {
                op: "conv_tokens",
                lhs: vec![c_out],
                rhs: self.nodes[bias.0].tensor.shape().to_vec(),
            });
        }
        let out_len = pooled_length(n, kernel, stride, pad)?;
        let src = self.data(x);
        let w = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![0.0; out_len * c_out];
        for i in 0..out_len {
            let row_out = &mut out[i * c_out..(i + 1) * c_out];
            row_out.copy_from_slice(b);
            for j in 0..kernel {
                let pos = (i * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                let row = &src[pos as usize * c_in..(pos as usize + 1) * c_in];
                for (a, &xv) in row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let w_row = &w[(j * c_in + a) * c_out..(j * c_in + a + 1) * c_out];
                    for (o, &wv) in row_out.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let geom = PoolGeom { kernel, stride, pad };
        self.push_op(
            "conv_tokens",
            vec![out_len, c_out],
            out,
            Op::ConvTokens { x, weight, bias, geom },
            &[x, weight, bias],
        )
    }

    /// 2D max pooling over the √n×√n token grid (row-major), per channel.
    pub fn max_pool_tokens_2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> TensorResult<NodeId> {
        let (n, c) = self.matrix("max_pool_tokens_2d", x)?;
        let grid_in = exact_sqrt(n)?;
        let grid_out = pooled_length(grid_in, kernel, stride, pad)?;
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; grid_out * grid_out * c];
        let mut argmax = vec![usize::MAX; grid_out * grid_out * c];
        for gr in 0..grid_out {
            for gc in 0..grid_out {
                let out_tok = gr * grid_out + gc;
                for dr in 0..kernel {
                    let r = (gr * stride + dr) as isize - pad as isize;
                    if r < 0 || r as usize >= grid_in {
                        continue;
                    }
                    for dc in 0..kernel {
                        let q = (gc * stride + dc) as isize - pad as isize;
                        if q < 0 || q as usize >= grid_in {
                            continue;
                        }
                        let tok = r as usize * grid_in + q as usize;
                        for ch in 0..c {
                            let v = src[tok * c + ch];
                            if v > out[out_tok * c + ch] {
                                out[out_tok * c + ch] = v;
                                argmax[out_tok * c + ch] = tok;
                            }
                        }
                    }
                }
            }
        }
        self.push_op(
            "max_pool_tokens_2d",
            vec![grid_out * grid_out, c],
            out,
            Op::MaxPoolTokens2d { x, argmax },
            &[x],
        )
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by 1/(1−p). Identity when p = 0.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng) -> TensorResult<NodeId> {
        let shape = self.nodes[x.0].tensor.shape().to_vec();
        if p <= 0.0 {
            let out = self.data(x).to_vec();
            let mask = vec![1.0; out.len()];
            return self.push_op("dropout", shape, out, Op::Dropout { x, mask }, &[x]);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = self
            .data(x)
            .iter()
            .map(|_| if rng.next_f64() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push_op("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean softmax cross-entropy over a batch of logit rows.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> TensorResult<NodeId> {
        let (b, c) = self.matrix("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfBounds { op: "cross_entropy", index: bad, bound: c });
        }
        let mut total = 0.0;
        for (row, &label) in self.data(logits).chunks_exact(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total /= b as f64;
        self.push_op(
            "cross_entropy",
            vec![1, 1],
            vec![total],
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            &[logits],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate `grad` on every `requires_grad` ancestor of `loss`,
    /// accumulating additively across fan-out.
    pub fn backward(&mut self, loss: NodeId) -> TensorResult<()> {
        let loss_tensor = &self.nodes[loss.0].tensor;
        if loss_tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_tensor.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].tensor.requires_grad() {
                self.nodes[i].tensor.set_grad(g);
            }
        }
        Ok(())
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], target: NodeId, numel: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; numel]);
        add(slot);
    }

    fn operand_numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].tensor.numel()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].tensor.shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].tensor.shape();
                    (s[0], s[1])
                };
                let n = out_shape[1];
                if self.wants_grad(a) {
                    // dA = G · Bᵀ
                    let bd = self.data(b);
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_raw(g, &bt, m, n, k, &mut da);
                    Self::accumulate(grads, a, m * k, |slot| {
                        for (s, v) in slot.iter_mut().zip(&da) {
                            *s += v;
                        }
                    });
                }
                if self.wants_grad(b) {
                    // dB = Aᵀ · G
                    let ad = self.data(a);
                    let mut at = vec![0.0; k * m];
                    for p in 0..m {
                        for j in 0..k {
                            at[j * m + p] = ad[p * k + j];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, g, k, m, n, &mut db);
                    Self::accumulate(grads, b, k * n, |slot| {
                        for (s, v) in slot.iter_mut().zip(&db) {
                            *s += v;
                        }
                    });
                }
            }

            Op::Transpose { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    Self::accumulate(grads, x, r * c, |slot| {
                        for i2 in 0..r {
                            for j in 0..c {
                                slot[j * r + i2] += g[i2 * c + j];
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                for &t in [a, b].into_iter() {
                    if self.wants_grad(t) {
                        Self::accumulate(grads, t, g.len(), |slot| {
                            for (s, v) in slot.iter_mut().zip(g) {
                                *s += v;
                            }
                        });
                    }
                }
            }

            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = out_shape[1];
                if self.wants_grad(x) {
                    Self::accumulate(grads, x, g.len(), |slot| {
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v;
                        }
                    });
                }
                if self.wants_grad(bias) {
                    Self::accumulate(grads, bias, c, |slot| {
                        for row in g.chunks_exact(c) {
                            for (s, v) in slot.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    });
                }
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants_grad(a) {
                    let bd = self.data(b).to_vec();
                    Self::accumulate(grads, a, g.len(), |slot| {
                        for ((s, v), bv) in slot.iter_mut().zip(g).zip(&bd) {
                            *s += v * bv;
                        }
                    });
                }
                if self.wants_grad(b) {
                    let ad = self.data(a).to_vec();
                    Self::accumulate(grads, b, g.len(), |slot| {
                        for ((s, v), av) in slot.iter_mut().zip(g).zip(&ad) {
                            *s += v * av;
                        }
                    });
                }
            }

            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.wants_grad(x) {
                    Self::accumulate(grads, x, g.len(), |slot| {
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v * factor;
                        }
                    });
                }
            }

            Op::Gelu { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let xd = self.data(x).to_vec();
                    Self::accumulate(grads, x, g.len(), |slot| {
                        for ((s, v), &xv) in slot.iter_mut().zip(g).zip(&xd) {
                            *s += v * (norm_cdf(xv) + xv * norm_pdf(xv));
                        }
                    });
                }
            }

            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let c = out_shape[1];
                    let s_out = self.data(NodeId(i)).to_vec();
                    Self::accumulate(grads, x, g.len(), |slot| {
                        for ((slot_row, g_row), s_row) in
                            slot.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(s_out.chunks_exact(c))
                        {
                            let dot: f64 = g_row.iter().zip(s_row).map(|(gv, sv)| gv * sv).sum();
                            for ((sl, &gv), &sv) in slot_row.iter_mut().zip(g_row).zip(s_row) {
                                *sl += sv * (gv - dot);
                            }
                        }
                    });
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let c = out_shape[1];
                let xd = self.data(x);
                let gd = self.data(gamma);
                let want_x = self.wants_grad(x);
                let want_g = self.wants_grad(gamma);
                let want_b = self.wants_grad(beta);
                let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dgamma = if want_g { vec![0.0; c] } else { Vec::new() };
                let mut dbeta = if want_b { vec![0.0; c] } else { Vec::new() };
                for (row_idx, (row, g_row)) in xd.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    if want_g {
                        for j in 0..c {
                            dgamma[j] += g_row[j] * xhat[j];
                        }
                    }
                    if want_b {
                        for j in 0..c {
                            dbeta[j] += g_row[j];
                        }
                    }
                    if want_x {
                        let dxhat: Vec<f64> = (0..c).map(|j| g_row[j] * gd[j]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dx[row_idx * c + j] +=
                                inv_std / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                if want_x {
                    Self::accumulate(grads, x, dx.len(), |slot| {
                        for (s, v) in slot.iter_mut().zip(&dx) {
                            *s += v;
                        }
                    });
                }
                if want_g {
                    Self::accumulate(grads, gamma, c, |slot| {
                        for (s, v) in slot.iter_mut().zip(&dgamma) {
                            *s += v;
                        }
                    });
                }
                if want_b {
                    Self::accumulate(grads, beta, c, |slot| {
                        for (s, v) in slot.iter_mut().zip(&dbeta) {
                            *s += v;
                        }
                    });
                }
            }

            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.wants_grad(x) {
                    let c = out_shape[1];
                    let numel = self.operand_numel(x);
                    Self::accumulate(grads, x, numel, |slot| {
                        for (j, v) in g.iter().enumerate() {
                            slot[start * c + j] += v;
                        }
                    });
                }
            }

            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                if self.wants_grad(x) {
                    let len = out_shape[1];
                    let c = self.nodes[x.0].tensor.shape()[1];
                    let numel = self.operand_numel(x);
                    Self::accumulate(grads, x, numel, |slot| {
                        for (i2, g_row) in g.chunks_exact(len).enumerate() {
                            for (j, v) in g_row.iter().enumerate() {
                                slot[i2 * c + start + j] += v;
                            }
                        }
                    });
                }
            }

            Op::ConcatRows { parts } => {
                let c = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].tensor.shape()[0];
                    if self.wants_grad(p) {
                        let numel = self.operand_numel(p);
                        let chunk = &g[offset * c..(offset + pr) * c];
                        Self::accumulate(grads, p, numel, |slot| {
                            for (s, v) in slot.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        });
                    }
                    offset += pr;
                }
            }

            Op::ConcatCols { parts } => {
                let total = out_shape[1];
                let r = out_shape[0];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].tensor.shape()[1];
                    if self.wants_grad(p) {
                        let numel = self.operand_numel(p);
                        Self::accumulate(grads, p, numel, |slot| {
                            for i2 in 0..r {
                                for j in 0..pc {
                                    slot[i2 * pc + j] += g[i2 * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }

            Op::MeanRows { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let c = out_shape[1];
                    let r = self.nodes[x.0].tensor.shape()[0];
                    let numel = self.operand_numel(x);
                    let scale = 1.0 / r as f64;
                    Self::accumulate(grads, x, numel, |slot| {
                        for row in slot.chunks_exact_mut(c) {
                            for (s, v) in row.iter_mut().zip(g) {
                                *s += v * scale;
                            }
                        }
                    });
                }
            }

            Op::Sum { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let numel = self.operand_numel(x);
                    let gv = g[0];
                    Self::accumulate(grads, x, numel, |slot| {
                        for s in slot.iter_mut() {
                            *s += gv;
                        }
                    });
                }
            }

            Op::MaxPoolTokens { x, argmax, .. } | Op::MaxPoolTokens2d { x, argmax, .. } => {
                let x = *x;
                if self.wants_grad(x) {
                    let c = out_shape[1];
                    let numel = self.operand_numel(x);
                    Self::accumulate(grads, x, numel, |slot| {
                        for (flat, v) in g.iter().enumerate() {
                            let src_tok = argmax[flat];
                            debug_assert_ne!(src_tok, usize::MAX);
                            slot[src_tok * c + flat % c] += v;
                        }
                    });
                }
            }

            Op::AvgPoolTokens { x, geom } => {
                let (x, geom) = (*x, *geom);
                if self.wants_grad(x) {
                    let c = out_shape[1];
                    let out_len = out_shape[0];
                    let n = self.nodes[x.0].tensor.shape()[0];
                    let numel = self.operand_numel(x);
                    Self::accumulate(grads, x, numel, |slot| {
                        for i2 in 0..out_len {
                            let in_range: Vec<usize> = (0..geom.kernel)
                                .filter_map(|j| {
                                    let pos = (i2 * geom.stride + j) as isize - geom.pad as isize;
                                    (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
                                })
                                .collect();
                            let scale = 1.0 / in_range.len() as f64;
                            for &row in &in_range {
                                for ch in 0..c {
                                    slot[row * c + ch] += g[i2 * c + ch] * scale;
                                }
                            }
                        }
                    });
                }
            }

            Op::ConvTokens { x, weight, bias, geom } => {
                let (x, weight, bias, geom) = (*x, *weight, *bias, *geom);
                let c_out = out_shape[1];
                let out_len = out_shape[0];
                let (n, c_in) = {
                    let s = self.nodes[x.0].tensor.shape();
                    (s[0], s[1])
                };
                if self.wants_grad(bias) {
                    Self::accumulate(grads, bias, c_out, |slot| {
                        for row in g.chunks_exact(c_out) {
                            for (s, v) in slot.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    });
                }
                let want_x = self.wants_grad(x);
                let want_w = self.wants_grad(weight);
                if want_x || want_w {
                    let xd = self.data(x).to_vec();
                    let wd = self.data(weight).to_vec();
                    let mut dx = if want_x { vec![0.0; n * c_in] } else { Vec::new() };
                    let mut dw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
                    for i2 in 0..out_len {
                        let g_row = &g[i2 * c_out..(i2 + 1) * c_out];
                        for j in 0..geom.kernel {
                            let pos = (i2 * geom.stride + j) as isize - geom.pad as isize;
                            if pos < 0 || pos as usize >= n {
                                continue;
                            }
                            let row = pos as usize;
                            for a in 0..c_in {
                                let w_off = (j * c_in + a) * c_out;
                                if want_w {
                                    let xv = xd[row * c_in + a];
                                    for (t, &gv) in dw[w_off..w_off + c_out].iter_mut().zip(g_row) {
                                        *t += xv * gv;
                                    }
                                }
                                if want_x {
                                    let mut acc = 0.0;
                                    for (wv, &gv) in wd[w_off..w_off + c_out].iter().zip(g_row) {
                                        acc += wv * gv;
                                    }
                                    dx[row * c_in + a] += acc;
                                }
                            }
                        }
                    }
                    if want_x {
                        Self::accumulate(grads, x, n * c_in, |slot| {
                            for (s, v) in slot.iter_mut().zip(&dx) {
                                *s += v;
                            }
                        });
                    }
                    if want_w {
                        let numel = self.operand_numel(weight);
                        Self::accumulate(grads, weight, numel, |slot| {
                            for (s, v) in slot.iter_mut().zip(&dw) {
                                *s += v;
                            }
                        });
                    }
                }
            }

            Op::Dropout { x, mask } => {
                let x = *x;
                if self.wants_grad(x) {
                    Self::accumulate(grads, x, g.len(), |slot| {
                        for ((s, v), m) in slot.iter_mut().zip(g).zip(mask) {
                            *s += v * m;
                        }
                    });
                }
            }

            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                if self.wants_grad(logits) {
                    let (b, c) = {
                        let s = self.nodes[logits.0].tensor.shape();
                        (s[0], s[1])
                    };
                    let ld = self.data(logits).to_vec();
                    let gv = g[0] / b as f64;
                    Self::accumulate(grads, logits, b * c, |slot| {
                        for (bi, row) in ld.chunks_exact(c).enumerate() {
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for (j, e) in exps.iter().enumerate() {
                                let p = e / sum;
                                let target = if j == labels[bi] { 1.0 } else { 0.0 };
                                slot[bi * c + j] += gv * (p - target);
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "index {}: {} vs {}", i, a, e);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[6.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::DimensionMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 2] }
        );
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "message: {}", msg);
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        let mut rng = Rng::new(42);
        for _ in 0..20 {
            let (m, k, n, p) = (
                1 + rng.next_below(6) as usize,
                1 + rng.next_below(6) as usize,
                1 + rng.next_below(6) as usize,
                1 + rng.next_below(6) as usize,
            );
            let a = randn(&mut rng, m, k);
            let b = randn(&mut rng, k, n);
            let c = randn(&mut rng, n, p);
            let mut g = Graph::new();
            let (ia, ib, ic) = (
                g.leaf(a).unwrap(),
                g.leaf(b).unwrap(),
                g.leaf(c).unwrap(),
            );
            let ab = g.matmul(ia, ib).unwrap();
            let left = g.matmul(ab, ic).unwrap();
            let bc = g.matmul(ib, ic).unwrap();
            let right = g.matmul(ia, bc).unwrap();
            let (l, r) = (g.data(left), g.data(right));
            let diff: f64 = l.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let norm: f64 = l.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff <= 1e-9 * norm.max(1.0), "relative Frobenius error {}", diff / norm.max(1.0));
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert_close(g.data(s), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_single_element_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 1, vec![5.0]).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.data(s), &[1.0]);
    }

    #[test]
    fn softmax_ln2_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.0, 2.0_f64.ln()]).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert_close(g.data(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_matrices() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let r = 1 + rng.next_below(8) as usize;
            let c = 1 + rng.next_below(8) as usize;
            let data: Vec<f64> = (0..r * c).map(|_| rng.normal() * 50.0).collect();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(r, c, data).unwrap()).unwrap();
            let s = g.softmax_rows(x).unwrap();
            for row in g.data(s).chunks_exact(c) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {}", sum);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_beta() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 4, vec![3.5; 4]).unwrap()).unwrap();
        let gamma = g.leaf(Tensor::vector(&[1.0; 4])).unwrap();
        let beta = g.leaf(Tensor::vector(&[0.25, -1.0, 0.0, 7.0])).unwrap();
        let out = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert_close(g.data(out), &[0.25, -1.0, 0.0, 7.0], 1e-15);
    }

    #[test]
    fn layer_norm_two_element_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let gamma = g.leaf(Tensor::vector(&[1.0, 1.0])).unwrap();
        let beta = g.leaf(Tensor::vector(&[0.0, 0.0])).unwrap();
        let out = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let expect = 1.0 / (1.0 + 1e-6_f64).sqrt();
        assert_close(g.data(out), &[expect, -expect], 1e-12);
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, 3, 5);
        let mut g = Graph::new();
        let xid = g.leaf(x).unwrap();
        let gamma = g.leaf(Tensor::vector(&[0.0; 5])).unwrap();
        let beta = g.leaf(Tensor::vector(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let out = g.layer_norm(xid, gamma, beta, 1e-6).unwrap();
        for row in g.data(out).chunks_exact(5) {
            assert_close(row, &[1.0, 2.0, 3.0, 4.0, 5.0], 1e-15);
        }
    }

    #[test]
    fn layer_norm_normalizes_mean_and_variance() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let c = 2 + rng.next_below(7) as usize;
            let x = randn(&mut rng, 1, c);
            let row: Vec<f64> = x.data().to_vec();
            let mean = row.iter().sum::<f64>() / c as f64;
            let sigma2 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            if sigma2 < 1e-8 {
                continue;
            }
            let eps = 1e-6;
            let mut g = Graph::new();
            let xid = g.leaf(x).unwrap();
            let gamma = g.leaf(Tensor::vector(&vec![1.0; c])).unwrap();
            let beta = g.leaf(Tensor::vector(&vec![0.0; c])).unwrap();
            let out = g.layer_norm(xid, gamma, beta, eps).unwrap();
            let o = g.data(out);
            let o_mean = o.iter().sum::<f64>() / c as f64;
            let o_var = o.iter().map(|v| (v - o_mean) * (v - o_mean)).sum::<f64>() / c as f64;
            assert!(o_mean.abs() < 1e-9, "mean {}", o_mean);
            let target = 1.0 / (1.0 + eps / sigma2);
            assert!((o_var - target).abs() < 1e-6, "var {} target {}", o_var, target);
        }
    }

    #[test]
    fn gelu_known_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![0.0, 10.0, 1.0]).unwrap()).unwrap();
        let out = g.gelu(x).unwrap();
        let o = g.data(out);
        assert_eq!(o[0], 0.0);
        assert!((o[1] - 10.0).abs() < 1e-9, "gelu(10) = {}", o[1]);
        // Phi(1) = 0.841344746..., so gelu(1) = 1 * Phi(1).
        assert!((o[2] - 0.8413447460685429).abs() < 1e-12, "gelu(1) = {}", o[2]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::vector(&[1.0, 2.0, 3.0]).with_requires_grad(true))
            .unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::matrix(1, 2, vec![2.0, -1.0]).with_requires_grad(true))
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::vector(&[1.5, -0.5]).with_requires_grad(true))
            .unwrap();
        let s1 = g.sum(x).unwrap();
        let s2 = g.sum(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::matrix(2, 2, vec![1.0; 4]).with_requires_grad(true))
            .unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn max_pool_window_enumeration() {
        // Tokens [1,3,2,5,4], k=3, s=2, pad=1: windows {pad,1,3},{3,2,5},{5,4,pad}.
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::matrix(5, 1, vec![1.0, 3.0, 2.0, 5.0, 4.0]).unwrap())
            .unwrap();
        let out = g.max_pool_tokens(x, 3, 2, 1).unwrap();
        assert_eq!(g.data(out), &[3.0, 5.0, 5.0]);
    }

    #[test]
    fn avg_pool_excludes_padding_from_divisor() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::matrix(5, 1, vec![1.0, 3.0, 2.0, 5.0, 4.0]).unwrap())
            .unwrap();
        let out = g.avg_pool_tokens(x, 3, 2, 1).unwrap();
        assert_close(g.data(out), &[2.0, 10.0 / 3.0, 4.5], 1e-15);
    }

    #[test]
    fn avg_pool_of_constant_sequence_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![9, 4], 2.5)).unwrap();
        let out = g.avg_pool_tokens(x, 3, 2, 1).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 4]);
        assert!(g.data(out).iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn max_pool_dominates_avg_pool() {
        let mut rng = Rng::new(19);
        for _ in 0..50 {
            let n = 1 + rng.next_below(30) as usize;
            let c = 1 + rng.next_below(6) as usize;
            let x = randn(&mut rng, n, c);
            for pad in [0usize, 1] {
                if n + 2 * pad < 3 {
                    continue;
                }
                let mut g = Graph::new();
                let xid = g.leaf(x.clone()).unwrap();
                let mx = g.max_pool_tokens(xid, 3, 2, pad).unwrap();
                let av = g.avg_pool_tokens(xid, 3, 2, pad).unwrap();
                for (m, a) in g.data(mx).iter().zip(g.data(av)) {
                    assert!(m >= a, "max {} < avg {}", m, a);
                }
            }
        }
    }

    #[test]
    fn max_pool_2d_single_window() {
        // 2x2 grid [[1,2],[3,4]], k=3, s=2, pad=1: one window sees the whole grid.
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let out = g.max_pool_tokens_2d(x, 3, 2, 1).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1]);
        assert_eq!(g.data(out), &[4.0]);
    }

    #[test]
    fn max_pool_2d_halves_the_grid() {
        let mut rng = Rng::new(23);
        let x = randn(&mut rng, 196, 3);
        let mut g = Graph::new();
        let xid = g.leaf(x).unwrap();
        let out = g.max_pool_tokens_2d(xid, 3, 2, 1).unwrap();
        assert_eq!(g.value(out).shape(), &[49, 3]);
    }

    #[test]
    fn max_pool_2d_rejects_non_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![6, 2])).unwrap();
        let err = g.max_pool_tokens_2d(x, 3, 2, 1).unwrap_err();
        assert!(matches!(err, TensorError::NotSquareTokenCount { len: 6 }));
    }

    #[test]
    fn max_pool_2d_constant_grid_stays_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![16, 2], -1.25)).unwrap();
        let out = g.max_pool_tokens_2d(x, 3, 2, 1).unwrap();
        assert!(g.data(out).iter().all(|&v| v == -1.25));
    }

    #[test]
    fn conv_tokens_matches_hand_computation() {
        // n=3, c_in=1, c_out=1, k=3, s=2, pad=1, weight taps [w0,w1,w2]=[1,10,100].
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let w = g.leaf(Tensor::matrix(3, 1, vec![1.0, 10.0, 100.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::vector(&[0.5])).unwrap();
        let out = g.conv_tokens(x, w, b, 3, 2, 1).unwrap();
        // Window 0 covers [pad, x0, x1] -> 10*1 + 100*2 = 210; window 1 covers
        // [x1, x2, pad] -> 1*2 + 10*3 = 32.
        assert_close(g.data(out), &[210.5, 32.5], 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = Rng::new(4);
        let x = randn(&mut rng, 4, 4);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone()).unwrap();
        let out = g.dropout(xid, 0.0, &mut rng).unwrap();
        assert_eq!(g.data(out), x.data());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = Rng::new(4);
        let x = Tensor::full(vec![100, 1], 1.0);
        let mut g = Graph::new();
        let xid = g.leaf(x).unwrap();
        let out = g.dropout(xid, 0.5, &mut rng).unwrap();
        let kept = g.data(out).iter().filter(|&&v| v != 0.0).count();
        assert!(g.data(out).iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-15));
        assert!((20..=80).contains(&kept), "kept {}", kept);
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut g = Graph::new();
        // Uniform logits over 4 classes -> ln 4.
        let uniform = g.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap()).unwrap();
        let l1 = g.cross_entropy(uniform, &[2]).unwrap();
        assert!((g.data(l1)[0] - 4.0_f64.ln()).abs() < 1e-12);
        // Confident correct logit -> ~0.
        let confident = g.leaf(Tensor::matrix(1, 3, vec![20.0, 0.0, 0.0]).unwrap()).unwrap();
        let l2 = g.cross_entropy(confident, &[0]).unwrap();
        assert!(g.data(l2)[0] < 1e-8);
        // Logits [0, ln 3], label 0 -> -ln(1/4) = ln 4.
        let skew = g.leaf(Tensor::matrix(1, 2, vec![0.0, 3.0_f64.ln()]).unwrap()).unwrap();
        let l3 = g.cross_entropy(skew, &[0]).unwrap();
        assert!((g.data(l3)[0] - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn leaf_rejects_non_finite_data() {
        let mut g = Graph::new();
        let t = Tensor::vector(&[1.0, f64::NAN]);
        assert!(matches!(g.leaf(t), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn overflow_is_an_error_not_a_silent_inf() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 1, vec![1e308]).unwrap()).unwrap();
        let doubled = g.scale(x, 4.0);
        assert!(matches!(doubled, Err(TensorError::NonFinite { op: "scale" })));
    }

    // ── Per-op gradient checks ─────────────────────────────────────────

    fn check_op<F>(name: &str, inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> TensorResult<NodeId>,
    {
        let err = grad_check_multi(build, inputs, 1e-5).unwrap();
        assert!(err < 1e-6, "{}: max_rel_error {}", name, err);
    }

    #[test]
    fn grad_check_every_op_at_random_shapes() {
        let mut rng = Rng::new(1234);
        let r = 2 + rng.next_below(6) as usize;
        let k = 2 + rng.next_below(6) as usize;
        let c = 2 + rng.next_below(6) as usize;

        let a = randn(&mut rng, r, k);
        let b = randn(&mut rng, k, c);
        check_op("matmul", &[a.clone(), b.clone()], |g, ids| {
            let m = g.matmul(ids[0], ids[1])?;
            g.sum(m)
        });

        check_op("transpose", &[a.clone()], |g, ids| {
            let t = g.transpose(ids[0])?;
            let sq = g.mul(t, t)?;
            g.sum(sq)
        });

        let a2 = randn(&mut rng, r, c);
        let b2 = randn(&mut rng, r, c);
        check_op("add+mul", &[a2.clone(), b2.clone()], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let m = g.mul(s, ids[0])?;
            g.sum(m)
        });

        let bias = randn(&mut rng, 1, c);
        let bias_vec = Tensor::vector(bias.data());
        check_op("add_bias", &[a2.clone(), bias_vec], |g, ids| {
            let s = g.add_bias(ids[0], ids[1])?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        });

        check_op("scale", &[a2.clone()], |g, ids| {
            let s = g.scale(ids[0], -1.7)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        });

        check_op("gelu", &[a2.clone()], |g, ids| {
            let s = g.gelu(ids[0])?;
            g.sum(s)
        });

        check_op("softmax_rows", &[a2.clone()], |g, ids| {
            let s = g.softmax_rows(ids[0])?;
            let w = g.mul(s, s)?;
            g.sum(w)
        });

        let gamma = randn(&mut rng, 1, c);
        let beta = randn(&mut rng, 1, c);
        check_op(
            "layer_norm",
            &[a2.clone(), Tensor::vector(gamma.data()), Tensor::vector(beta.data())],
            |g, ids| {
                let ln = g.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                let sq = g.mul(ln, ln)?;
                g.sum(sq)
            },
        );

        check_op("slice_and_concat", &[a2.clone()], |g, ids| {
            let top = g.slice_rows(ids[0], 0, 1)?;
            let rest = g.slice_rows(ids[0], 1, r - 1)?;
            let back = g.concat_rows(&[rest, top])?;
            let left = g.slice_cols(back, 0, 1)?;
            let right = g.slice_cols(back, 1, c - 1)?;
            let re = g.concat_cols(&[right, left])?;
            let sq = g.mul(re, re)?;
            g.sum(sq)
        });

        check_op("mean_rows", &[a2.clone()], |g, ids| {
            let m = g.mean_rows(ids[0])?;
            let sq = g.mul(m, m)?;
            g.sum(sq)
        });
    }

    #[test]
    fn grad_check_pooling_ops() {
        let mut rng = Rng::new(77);
        // Distinct values keep the max-pool argmax stable under the probe step.
        let n = 7;
        let c = 3;
        let data: Vec<f64> = (0..n * c).map(|i| i as f64 * 0.37 + rng.next_f64() * 0.1).collect();
        let mut shuffled = data.clone();
        rng.shuffle(&mut shuffled);
        let x = Tensor::matrix(n, c, shuffled).unwrap();

        for pad in [0usize, 1] {
            check_op("max_pool_tokens", &[x.clone()], |g, ids| {
                let p = g.max_pool_tokens(ids[0], 3, 2, pad)?;
                let sq = g.mul(p, p)?;
                g.sum(sq)
            });
            check_op("avg_pool_tokens", &[x.clone()], |g, ids| {
                let p = g.avg_pool_tokens(ids[0], 3, 2, pad)?;
                let sq = g.mul(p, p)?;
                g.sum(sq)
            });
        }

        let grid = randn(&mut rng, 9, 2);
        check_op("max_pool_tokens_2d", &[grid], |g, ids| {
            let p = g.max_pool_tokens_2d(ids[0], 3, 2, 1)?;
            let sq = g.mul(p, p)?;
            g.sum(sq)
        });

        let w = randn(&mut rng, 3 * c, c);
        let bias = randn(&mut rng, 1, c);
        check_op("conv_tokens", &[x.clone(), w, Tensor::vector(bias.data())], |g, ids| {
            let p = g.conv_tokens(ids[0], ids[1], ids[2], 3, 2, 1)?;
            let sq = g.mul(p, p)?;
            g.sum(sq)
        });
    }

    #[test]
    fn grad_check_cross_entropy_at_random_logits() {
        let mut rng = Rng::new(99);
        let logits = randn(&mut rng, 4, 6);
        let labels = [3usize, 0, 5, 2];
        let err = grad_check_multi(
            |g, ids| g.cross_entropy(ids[0], &labels),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax cross-entropy max_rel_error {}", err);
    }

    #[test]
    fn grad_check_of_plain_sum_is_nearly_exact() {
        let mut rng = Rng::new(5);
        let x = randn(&mut rng, 3, 1);
        let err = grad_check_multi(|g, ids| g.sum(ids[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "sum max_rel_error {}", err);
    }

    #[test]
    fn grad_check_rejects_out_of_range_step() {
        let x = Tensor::vector(&[1.0]);
        let err = grad_check_multi(|g, ids| g.sum(ids[0]), std::slice::from_ref(&x), 1e-2).unwrap_err();
        assert!(matches!(err, TensorError::StepOutOfRange { .. }));
    }
}
