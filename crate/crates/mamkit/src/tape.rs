//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients additively into each node.
//! Values are immutable once produced; gradient buffers are the only mutable
//! state and are touched only inside a single backward pass.

use crate::rng::RngStream;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, NumericError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    /// `a @ b^T` where `a` is m x k and `b` is n x k.
    MatMulNT { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    AddBias { x: VarId, b: VarId },
    Scale { x: VarId, factor: f64 },
    AddConst { x: VarId },
    Gelu { x: VarId },
    Softmax { x: VarId, axis: usize },
    CrossEntropy { logits: VarId, class: usize },
    SumAll { x: VarId },
    MeanAxis { x: VarId, axis: usize },
    RowSums { x: VarId },
    DivRows { x: VarId, s: VarId, eps: f64 },
    ConcatRows { inputs: Vec<VarId> },
    SliceRows { x: VarId, start: usize },
    GatherRows { x: VarId, indices: Vec<usize> },
    Reshape { x: VarId },
    Transpose { x: VarId },
    /// Forward: per-column one-hot argmax. Backward: identity (the gradient of
    /// the soft column is passed through unchanged).
    StraightThroughCols { soft: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId },
    Attention { q: VarId, k: VarId, v: VarId, heads: usize },
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    /// Cached forward intermediates for fused ops.
    aux: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.push_aux(value, op, needs_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            aux,
        });
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(NumericError::DimensionMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b }, ng))
    }

    /// `a @ b^T` with `a`: m x k and `b`: n x k.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(NumericError::DimensionMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMulNT { a, b }, ng))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add { a, b }, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Mul { a, b }, ng)
    }

    /// `[r, c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        assert_eq!(tb.numel(), c, "add_bias: width mismatch");
        let r = tx.rows();
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(vec![r, c], data), Op::AddBias { x, b }, ng)
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Scale { x, factor }, ng)
    }

    /// Adds a constant tensor (no gradient flows into `offset`).
    pub fn add_const(&mut self, x: VarId, offset: &Tensor) -> VarId {
        let tx = self.value(x);
        assert_eq!(tx.shape(), offset.shape(), "add_const: shape mismatch");
        let data: Vec<f64> = tx
            .data()
            .iter()
            .zip(offset.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = tx.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::AddConst { x }, ng)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = tx.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Gelu { x }, ng)
    }

    /// Numerically stabilized softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> VarId {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let data = softmax_fwd(tx.data(), &shape, axis);
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Softmax { x, axis }, ng)
    }

    /// `-log softmax(logits)[class]` for a logit vector.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: VarId,
        class: usize,
    ) -> Result<VarId, NumericError> {
        let t = self.value(logits);
        let n = t.numel();
        if class >= n {
            return Err(NumericError::InvalidClass {
                class,
                num_classes: n,
            });
        }
        let row = t.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = lse - row[class];
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, class }, ng))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, ng)
    }

    /// Mean over one axis of a 2-D tensor: axis 0 -> `[c]`, axis 1 -> `[r]`.
    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> VarId {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let data = tx.data();
        let out = match axis {
            0 => {
                let mut v = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        v[j] += data[i * c + j];
                    }
                }
                v.iter_mut().for_each(|t| *t /= r as f64);
                Tensor::new(vec![c], v)
            }
            1 => {
                let v: Vec<f64> = (0..r)
                    .map(|i| data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::new(vec![r], v)
            }
            _ => panic!("mean_axis: axis {axis} out of range"),
        };
        let ng = self.needs(x);
        self.push(out, Op::MeanAxis { x, axis }, ng)
    }

    /// Row sums of a 2-D tensor, `[r, c] -> [r]`.
    pub fn row_sums(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let v: Vec<f64> = (0..r)
            .map(|i| tx.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(vec![r], v), Op::RowSums { x }, ng)
    }

    /// `x[i, j] / (s[i] + eps)`.
    pub fn div_rows(&mut self, x: VarId, s: VarId, eps: f64) -> VarId {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(ts.numel(), r, "div_rows: row count mismatch");
        let mut data = tx.data().to_vec();
        for i in 0..r {
            let d = ts.data()[i] + eps;
            for j in 0..c {
                data[i * c + j] /= d;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(Tensor::new(vec![r, c], data), Op::DivRows { x, s, eps }, ng)
    }

    /// Concatenate 2-D tensors along the row (token) axis.
    pub fn concat_rows(&mut self, inputs: &[VarId]) -> VarId {
        assert!(!inputs.is_empty(), "concat_rows: empty input");
        let c = self.value(inputs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in inputs {
            let t = self.value(id);
            assert_eq!(t.cols(), c, "concat_rows: width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = inputs.iter().any(|&i| self.needs(i));
        self.push(
            Tensor::new(vec![rows, c], data),
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let tx = self.value(x);
        let c = tx.cols();
        assert!(start + len <= tx.rows(), "slice_rows out of range");
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(vec![len, c], data), Op::SliceRows { x, start }, ng)
    }

    /// Gather rows of `x` by index; backward scatter-adds.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> VarId {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![indices.len(), c], data),
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> VarId {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, tx.numel(), "reshape: numel mismatch");
        let data = tx.data().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Reshape { x }, ng)
    }

    /// 2-D transpose, `[r, c] -> [c, r]`.
    pub fn transpose(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![c, r], data), Op::Transpose { x }, ng)
    }

    /// Hard per-column one-hot of a soft assignment matrix with
    /// straight-through gradients. Ties break toward the lowest row index.
    pub fn straight_through_cols(&mut self, soft: VarId) -> VarId {
        let t = self.value(soft);
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for j in 0..n {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for i in 0..m {
                let v = t.data()[i * n + j];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            data[best * n + j] = 1.0;
        }
        let ng = self.needs(soft);
        self.push(
            Tensor::new(vec![m, n], data),
            Op::StraightThroughCols { soft },
            ng,
        )
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), c);
        assert_eq!(tb.numel(), c);
        let mut out = vec![0.0; r * c];
        let mut aux = vec![0.0; 2 * r]; // (mean, inv_std) per row
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            aux[2 * i] = mean;
            aux[2 * i + 1] = inv_std;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_aux(
            Tensor::new(vec![r, c], out),
            Op::LayerNorm { x, gamma, beta },
            ng,
            aux,
        )
    }

    /// Fused multi-head self-attention over `[seq, width]` projections.
    /// Row-wise softmax of `Q K^T / sqrt(width / heads)` per head, applied to V.
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId, heads: usize) -> VarId {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (s, w) = (tq.rows(), tq.cols());
        assert_eq!(tk.shape(), tq.shape());
        assert_eq!(tv.shape(), tq.shape());
        assert_eq!(w % heads, 0, "width must be divisible by heads");
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; s * w];
        let mut probs = vec![0.0; heads * s * s];
        let mut qh = vec![0.0; s * dh];
        let mut kh = vec![0.0; s * dh];
        let mut vh = vec![0.0; s * dh];
        for h in 0..heads {
            copy_head(tq.data(), &mut qh, s, w, h, dh);
            copy_head(tk.data(), &mut kh, s, w, h, dh);
            copy_head(tv.data(), &mut vh, s, w, h, dh);
            let mut scores = vec![0.0; s * s];
            gemm_nt_acc(&mut scores, &qh, &kh, s, dh, s);
            scores.iter_mut().for_each(|x| *x *= scale);
            let p = softmax_fwd(&scores, &[s, s], 1);
            let mut oh = vec![0.0; s * dh];
            gemm_acc(&mut oh, &p, &vh, s, s, dh);
            paste_head(&oh, &mut out, s, w, h, dh);
            probs[h * s * s..(h + 1) * s * s].copy_from_slice(&p);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push_aux(
            Tensor::new(vec![s, w], out),
            Op::Attention { q, k, v, heads },
            ng,
            probs,
        )
    }

    /// 3x3 convolution with padding 1 over `[cin, h, w]` input.
    /// `weight` is `[cout, cin * 9]`, `bias` is `[cout]`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> VarId {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape();
        assert_eq!(xs.len(), 3, "conv2d expects [cin, h, w]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = tw.rows();
        assert_eq!(tw.cols(), cin * 9, "conv2d: weight width mismatch");
        assert_eq!(tb.numel(), cout);
        let hout = (h + 2 - 3) / stride + 1;
        let wout = (wd + 2 - 3) / stride + 1;
        let n = hout * wout;
        let cols = im2col(tx.data(), cin, h, wd, stride, hout, wout);
        let mut out = vec![0.0; cout * n];
        gemm_acc(&mut out, tw.data(), &cols, cout, cin * 9, n);
        for c in 0..cout {
            let bias = tb.data()[c];
            out[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push_aux(
            Tensor::new(vec![cout, hout, wout], out),
            Op::Conv2d { x, w, b, stride },
            ng,
            cols,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: VarId) -> &mut Vec<f64> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn add_to_grad(&mut self, id: VarId, src: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (g, s) in buf.iter_mut().zip(src) {
            *g += s;
        }
    }

    /// Backpropagate from a scalar output. Gradients accumulate additively;
    /// call once per tape.
    pub fn backward(&mut self, output: VarId) {
        assert_eq!(
            self.nodes[output.0].value.numel(),
            1,
            "backward requires a scalar output"
        );
        self.grad_buf(output)[0] = 1.0;
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nt_acc(&mut da, &grad, self.value(b).data(), m, n, k);
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn_acc(&mut db, self.value(a).data(), &grad, k, m, n);
                        self.add_to_grad(b, &db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    // out = a b^T; da = g b, db = g^T a
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).rows();
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm_acc(&mut da, &grad, self.value(b).data(), m, n, k);
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; n * k];
                        gemm_tn_acc(&mut db, &grad, self.value(a).data(), n, m, k);
                        self.add_to_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.add_to_grad(a, &grad);
                    self.add_to_grad(b, &grad);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(g, y)| g * y)
                            .collect();
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(g, x)| g * x)
                            .collect();
                        self.add_to_grad(b, &db);
                    }
                }
                Op::AddBias { x, b } => {
                    self.add_to_grad(x, &grad);
                    if self.needs(b) {
                        let c = self.value(b).numel();
                        let r = grad.len() / c;
                        let mut db = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += grad[i * c + j];
                            }
                        }
                        self.add_to_grad(b, &db);
                    }
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    self.add_to_grad(x, &dx);
                }
                Op::AddConst { x } => self.add_to_grad(x, &grad),
                Op::Gelu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.add_to_grad(x, &dx);
                }
                Op::Softmax { x, axis } => {
                    let out = self.nodes[idx].value.clone();
                    let dx = softmax_bwd(&grad, out.data(), out.shape(), axis);
                    self.add_to_grad(x, &dx);
                }
                Op::CrossEntropy { logits, class } => {
                    let t = self.value(logits);
                    let row = t.data();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let g0 = grad[0];
                    let dx: Vec<f64> = exps
                        .iter()
                        .enumerate()
                        .map(|(i, e)| g0 * (e / z - if i == class { 1.0 } else { 0.0 }))
                        .collect();
                    self.add_to_grad(logits, &dx);
                }
                Op::SumAll { x } => {
                    let n = self.value(x).numel();
                    self.add_to_grad(x, &vec![grad[0]; n]);
                }
                Op::MeanAxis { x, axis } => {
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    let mut dx = vec![0.0; r * c];
                    match axis {
                        0 => {
                            for i in 0..r {
                                for j in 0..c {
                                    dx[i * c + j] = grad[j] / r as f64;
                                }
                            }
                        }
                        1 => {
                            for i in 0..r {
                                for j in 0..c {
                                    dx[i * c + j] = grad[i] / c as f64;
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::RowSums { x } => {
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = grad[i];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::DivRows { x, s, eps } => {
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    let sv = self.value(s).data().to_vec();
                    if self.needs(x) {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let d = sv[i] + eps;
                            for j in 0..c {
                                dx[i * c + j] = grad[i * c + j] / d;
                            }
                        }
                        self.add_to_grad(x, &dx);
                    }
                    if self.needs(s) {
                        let xv = self.value(x).data().to_vec();
                        let mut ds = vec![0.0; r];
                        for i in 0..r {
                            let d = sv[i] + eps;
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += grad[i * c + j] * xv[i * c + j];
                            }
                            ds[i] = -acc / (d * d);
                        }
                        self.add_to_grad(s, &ds);
                    }
                }
                Op::ConcatRows { inputs } => {
                    let c = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for id in inputs {
                        let r = self.value(id).rows();
                        let part = grad[offset * c..(offset + r) * c].to_vec();
                        self.add_to_grad(id, &part);
                        offset += r;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = self.value(x).cols();
                    let total = self.value(x).numel();
                    let mut dx = vec![0.0; total];
                    dx[start * c..start * c + grad.len()].copy_from_slice(&grad);
                    self.add_to_grad(x, &dx);
                }
                Op::GatherRows { x, indices } => {
                    let c = self.value(x).cols();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += grad[row * c + j];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::Reshape { x } => self.add_to_grad(x, &grad),
                Op::Transpose { x } => {
                    // grad is [c, r]; scatter back transposed
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    let mut dx = vec![0.0; r * c];
                    for j in 0..c {
                        for i in 0..r {
                            dx[i * c + j] = grad[j * r + i];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::StraightThroughCols { soft } => self.add_to_grad(soft, &grad),
                Op::LayerNorm { x, gamma, beta } => {
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    let aux = self.nodes[idx].aux.clone();
                    let xv = self.value(x).data().to_vec();
                    let gv = self.value(gamma).data().to_vec();
                    let mut dx = vec![0.0; r * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..r {
                        let mean = aux[2 * i];
                        let inv_std = aux[2 * i + 1];
                        let row = &xv[i * c..(i + 1) * c];
                        let g = &grad[i * c..(i + 1) * c];
                        let xhat: Vec<f64> =
                            row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; c];
                        for j in 0..c {
                            dgamma[j] += g[j] * xhat[j];
                            dbeta[j] += g[j];
                            dxhat[j] = g[j] * gv[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std / cf
                                * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.add_to_grad(x, &dx);
                    self.add_to_grad(gamma, &dgamma);
                    self.add_to_grad(beta, &dbeta);
                }
                Op::Attention { q, k, v, heads } => {
                    let (s, w) = (self.value(q).rows(), self.value(q).cols());
                    let dh = w / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let probs = self.nodes[idx].aux.clone();
                    let qv = self.value(q).data().to_vec();
                    let kv = self.value(k).data().to_vec();
                    let vv = self.value(v).data().to_vec();
                    let mut dq = vec![0.0; s * w];
                    let mut dk = vec![0.0; s * w];
                    let mut dv = vec![0.0; s * w];
                    let mut qh = vec![0.0; s * dh];
                    let mut kh = vec![0.0; s * dh];
                    let mut vh = vec![0.0; s * dh];
                    let mut doh = vec![0.0; s * dh];
                    for h in 0..heads {
                        copy_head(&qv, &mut qh, s, w, h, dh);
                        copy_head(&kv, &mut kh, s, w, h, dh);
                        copy_head(&vv, &mut vh, s, w, h, dh);
                        copy_head(&grad, &mut doh, s, w, h, dh);
                        let p = &probs[h * s * s..(h + 1) * s * s];
                        // dV_h = P^T dO_h
                        let mut dvh = vec![0.0; s * dh];
                        gemm_tn_acc(&mut dvh, p, &doh, s, s, dh);
                        // dP = dO_h V_h^T
                        let mut dp = vec![0.0; s * s];
                        gemm_nt_acc(&mut dp, &doh, &vh, s, dh, s);
                        // dS through row softmax, then scale
                        let mut ds = softmax_bwd(&dp, p, &[s, s], 1);
                        ds.iter_mut().for_each(|x| *x *= scale);
                        // dQ_h = dS K_h ; dK_h = dS^T Q_h
                        let mut dqh = vec![0.0; s * dh];
                        gemm_acc(&mut dqh, &ds, &kh, s, s, dh);
                        let mut dkh = vec![0.0; s * dh];
                        gemm_tn_acc(&mut dkh, &ds, &qh, s, s, dh);
                        paste_head_acc(&dqh, &mut dq, s, w, h, dh);
                        paste_head_acc(&dkh, &mut dk, s, w, h, dh);
                        paste_head_acc(&dvh, &mut dv, s, w, h, dh);
                    }
                    self.add_to_grad(q, &dq);
                    self.add_to_grad(k, &dk);
                    self.add_to_grad(v, &dv);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xs = self.value(x).shape().to_vec();
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let os = self.nodes[idx].value.shape().to_vec();
                    let (cout, hout, wout) = (os[0], os[1], os[2]);
                    let n = hout * wout;
                    let cols = self.nodes[idx].aux.clone();
                    if self.needs(w) {
                        let mut dw = vec![0.0; cout * cin * 9];
                        gemm_nt_acc(&mut dw, &grad, &cols, cout, n, cin * 9);
                        self.add_to_grad(w, &dw);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = (0..cout)
                            .map(|c| grad[c * n..(c + 1) * n].iter().sum())
                            .collect();
                        self.add_to_grad(b, &db);
                    }
                    if self.needs(x) {
                        let mut dcols = vec![0.0; cin * 9 * n];
                        gemm_tn_acc(&mut dcols, self.value(w).data(), &grad, cin * 9, cout, n);
                        let dx = col2im(&dcols, cin, h, wd, stride, hout, wout);
                        self.add_to_grad(x, &dx);
                    }
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn softmax_fwd(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (r, c) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("softmax supports 1-D and 2-D tensors"),
    };
    let axis = if shape.len() == 1 { 1 } else { axis };
    assert!(axis < 2, "softmax: axis {axis} out of range");
    let mut out = vec![0.0; r * c];
    if axis == 1 {
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
    } else {
        for j in 0..c {
            let mut max = f64::NEG_INFINITY;
            for i in 0..r {
                max = max.max(data[i * c + j]);
            }
            let mut z = 0.0;
            for i in 0..r {
                let e = (data[i * c + j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for i in 0..r {
                out[i * c + j] /= z;
            }
        }
    }
    out
}

fn softmax_bwd(grad: &[f64], out: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (r, c) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!(),
    };
    let axis = if shape.len() == 1 { 1 } else { axis };
    let mut dx = vec![0.0; r * c];
    if axis == 1 {
        for i in 0..r {
            let mut dot = 0.0;
            for j in 0..c {
                dot += grad[i * c + j] * out[i * c + j];
            }
            for j in 0..c {
                dx[i * c + j] = out[i * c + j] * (grad[i * c + j] - dot);
            }
        }
    } else {
        for j in 0..c {
            let mut dot = 0.0;
            for i in 0..r {
                dot += grad[i * c + j] * out[i * c + j];
            }
            for i in 0..r {
                dx[i * c + j] = out[i * c + j] * (grad[i * c + j] - dot);
            }
        }
    }
    dx
}

fn copy_head(src: &[f64], dst: &mut [f64], s: usize, w: usize, h: usize, dh: usize) {
    for i in 0..s {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * w + h * dh..i * w + (h + 1) * dh]);
    }
}

fn paste_head(src: &[f64], dst: &mut [f64], s: usize, w: usize, h: usize, dh: usize) {
    for i in 0..s {
        dst[i * w + h * dh..i * w + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn paste_head_acc(src: &[f64], dst: &mut [f64], s: usize, w: usize, h: usize, dh: usize) {
    for i in 0..s {
        for j in 0..dh {
            dst[i * w + h * dh + j] += src[i * dh + j];
        }
    }
}

fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    hout: usize,
    wout: usize,
) -> Vec<f64> {
    let n = hout * wout;
    let mut cols = vec![0.0; cin * 9 * n];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = ci * h * w + iy as usize * w;
                    let dst_base = row + oy * wout;
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_base + ox] = x[src_base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    hout: usize,
    wout: usize,
) -> Vec<f64> {
    let n = hout * wout;
    let mut dx = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = row + oy * wout;
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_base + ix as usize] += dcols[src_base + ox];
                    }
                }
            }
        }
    }
    dx
}

/// I.i.d. standard Gumbel noise tensor drawn from an explicit stream.
pub fn gumbel_noise(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.next_gumbel()).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64 * 1.5 - 3.0).collect());
        let a = tape.constant(eye);
        let b = tape.constant(m.clone());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]));
        let s = tape.softmax(x, 0);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x2 = tape.constant(Tensor::new(vec![2], vec![1.0f64.ln(), 3.0f64.ln()]));
        let s2 = tape.softmax(x2, 0);
        let out = tape.value(s2).data();
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(2, "softmax");
        let data: Vec<f64> = (0..35).map(|_| rng.next_gaussian() * 3.0).collect();
        let x = tape.constant(Tensor::new(vec![5, 7], data));
        for axis in [0, 1] {
            let s = tape.softmax(x, axis);
            let t = tape.value(s);
            let (r, c) = (t.rows(), t.cols());
            if axis == 1 {
                for i in 0..r {
                    let sum: f64 = t.data()[i * c..(i + 1) * c].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            } else {
                for j in 0..c {
                    let sum: f64 = (0..r).map(|i| t.data()[i * c + j]).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
            assert!(t.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let mut tape = Tape::new();
        let sat = tape.constant(Tensor::new(vec![4], vec![20.0, 0.0, 0.0, 0.0]));
        let l = tape.cross_entropy_from_logits(sat, 0).unwrap();
        assert!(tape.value(l).item() < 1e-8);

        let uni = tape.constant(Tensor::new(vec![4], vec![1.0; 4]));
        for class in 0..4 {
            let l = tape.cross_entropy_from_logits(uni, class).unwrap();
            assert!((tape.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_class_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![0.0; 4]));
        assert!(tape.cross_entropy_from_logits(x, 4).is_err());
    }

    #[test]
    fn cross_entropy_matches_brute_force_softmax() {
        let mut tape = Tape::new();
        let logits = vec![1.0, 2.0, 3.0, 4.0];
        let x = tape.leaf(Tensor::new(vec![4], logits.clone()), true);
        let l = tape.cross_entropy_from_logits(x, 2).unwrap();
        // brute force: softmax then -log p[2]
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let expected = -(logits[2].exp() / z).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        tape.backward(l);
        let g = tape.grad(x).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let p = logits[i].exp() / z;
            let want = p - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_forward_hard_backward_identity() {
        let mut tape = Tape::new();
        let soft = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.9, 0.2, 0.5, 0.1, 0.8, 0.5]),
            true,
        );
        let hard = tape.straight_through_cols(soft);
        // ties (column 2) break toward the lowest row index
        assert_eq!(
            tape.value(hard).data(),
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
        let s = tape.sum_all(hard);
        tape.backward(s);
        assert_eq!(tape.grad(soft).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn gumbel_noise_is_deterministic() {
        let a = gumbel_noise(vec![4, 5], &mut RngStream::new(9, "g"));
        let b = gumbel_noise(vec![4, 5], &mut RngStream::new(9, "g"));
        assert_eq!(a, b);
    }
}
