//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced while it is alive.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately absent: apart from `matmul` and `scale`,
//! every binary op requires identical shapes. Use [`Graph::repeat_rows`] to
//! expand a bias row explicitly.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MaskedFill(Var, Vec<bool>),
    Dropout(Var, Vec<f64>),
    RepeatRows(Var),
    Reshape(Var),
    Select(Var, usize),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentPool {
        logits: Var,
        x: Var,
        lens: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Recording context. `'p` is the lifetime of borrowed parameter tensors.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    recording: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::InvalidArgument {
        op,
        msg: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
    })
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap()
}

impl<'p> Graph<'p> {
    /// A graph with the tape on.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph with the tape off: values are computed but nothing is
    /// recorded for backward.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, out: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &out)?;
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        Ok(self.push(Value::Owned(out), op, rg))
    }

    /// A value that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t)?;
        let rg = self.recording;
        Ok(self.push(Value::Owned(t), Op::Leaf, rg))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(Value::Owned(t), Op::Constant, false))
    }

    /// Binds a borrowed parameter tensor. Gradients for it are reported
    /// under `index` by [`Gradients::param`].
    pub fn param(&mut self, index: usize, t: &'p Tensor) -> Var {
        let rg = self.recording;
        self.push(Value::Borrowed(t), Op::Param(index), rg)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(Value::Owned(t), Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.values(), tb.values(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`, used for attention logits and dot-product scoring.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul_nt", ta)?;
        let (n, k2) = rank2("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.values(), tb.values(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = rank2("transpose", ta)?;
        let v = ta.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push_op("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let vals = ta.values().iter().zip(tb.values()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), vals)?;
        self.push_op(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let vals = ta.values().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), vals)?;
        self.push_op(name, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).values().iter().any(|x| *x <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "log",
                msg: "input must be strictly positive".into(),
            });
        }
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = last_dim(ta);
        let mut out = ta.values().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push_op("softmax", out, Op::Softmax(a), &[a])
    }

    /// Numerically stable `log(softmax(a))` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = last_dim(ta);
        let mut out = ta.values().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push_op("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.push_op("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.values().iter().sum::<f64>() / ta.len() as f64;
        self.push_op("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (rows, _) = rank2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = rank2("concat_cols", t)?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let v = self.value(*p).values();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push_op("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, cols) = rank2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let (r, c) = rank2("concat_rows", t)?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += r;
            out.extend_from_slice(t.values());
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push_op("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gathers rows of a rank-2 table; `embedding_lookup` when `table` is an
    /// embedding parameter.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = rank2("gather_rows", t)?;
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: "no indices".into(),
            });
        }
        if let Some(bad) = indices.iter().find(|i| **i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![indices.len(), cols], out)?;
        self.push_op("gather_rows", out, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Columns `[start, start + width)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = rank2("slice_cols", t)?;
        if width == 0 || start + width > cols {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {cols}", start + width),
            });
        }
        let v = t.values();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let out = Tensor::new(vec![rows, width], out)?;
        self.push_op("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get
    /// zero gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let vals = t
            .values()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { fill } else { *x })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), vals)?;
        self.push_op("masked_fill", out, Op::MaskedFill(a, mask.to_vec()), &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let vals = t.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), vals)?;
        self.push_op("dropout", out, Op::Dropout(a, mask), &[a])
    }

    /// Tiles a `[1, n]` row into `[rows, n]`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, n) = rank2("repeat_rows", t)?;
        if r != 1 || rows == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                msg: format!("expected a [1, n] row and rows > 0, got {:?}", t.shape()),
            });
        }
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(t.values());
        }
        let out = Tensor::new(vec![rows, n], out)?;
        self.push_op("repeat_rows", out, Op::RepeatRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push_op("reshape", out, Op::Reshape(a), &[a])
    }

    /// Element `index` (flat, row-major) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(TensorError::InvalidArgument {
                op: "select",
                msg: format!("index {index} out of range for {} elements", t.len()),
            });
        }
        let out = Tensor::scalar(t.values()[index]);
        self.push_op("select", out, Op::Select(a, index), &[a])
    }

    /// Multi-head scaled dot-product self-attention applied independently
    /// to consecutive row blocks of lengths `lens`. Columns are split evenly
    /// into `heads` heads; rows never attend across blocks.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, lens: &[usize], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = rank2("segment_attention", tq)?;
        if tk.shape() != tq.shape() {
            return Err(mismatch("segment_attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("segment_attention", tq, tv));
        }
        check_segments("segment_attention", lens, n)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "segment_attention",
                msg: format!("{d} columns do not split into {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (tq.values(), tk.values(), tv.values());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(lens.iter().map(|l| l * l).sum::<usize>() * heads);
        let mut r0 = 0;
        for &len in lens {
            for h in 0..heads {
                let c0 = h * dh;
                let start = probs.len();
                for i in 0..len {
                    let qi = &qv[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                    let row_start = probs.len();
                    for j in 0..len {
                        let kj = &kv[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        probs.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut probs[row_start..]);
                }
                let a = &probs[start..];
                for i in 0..len {
                    let o = &mut out[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                    for j in 0..len {
                        let w = a[i * len + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vv[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        for (x, y) in o.iter_mut().zip(vj) {
                            *x += w * y;
                        }
                    }
                }
            }
            r0 += len;
        }
        let out = Tensor::new(vec![n, d], out)?;
        let op = Op::SegmentAttention {
            q,
            k,
            v,
            lens: lens.to_vec(),
            heads,
            probs,
        };
        self.push_op("segment_attention", out, op, &[q, k, v])
    }

    /// Attention pooling per row block: the weights are a softmax of the
    /// `[n, 1]` `logits` within each block, and block `s` of the `[blocks, d]`
    /// output is the weighted sum of its rows of `x`.
    pub fn segment_pool(&mut self, logits: Var, x: Var, lens: &[usize]) -> Result<Var> {
        let (tl, tx) = (self.value(logits), self.value(x));
        let (n, d) = rank2("segment_pool", tx)?;
        if tl.shape() != [n, 1] {
            return Err(mismatch("segment_pool", tl, tx));
        }
        check_segments("segment_pool", lens, n)?;
        let mut weights = tl.values().to_vec();
        let xv = tx.values();
        let mut out = vec![0.0; lens.len() * d];
        let mut r0 = 0;
        for (s, &len) in lens.iter().enumerate() {
            softmax_in_place(&mut weights[r0..r0 + len]);
            let o = &mut out[s * d..(s + 1) * d];
            for i in r0..r0 + len {
                let w = weights[i];
                for (a, b) in o.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                    *a += w * b;
                }
            }
            r0 += len;
        }
        let out = Tensor::new(vec![lens.len(), d], out)?;
        let op = Op::SegmentPool {
            logits,
            x,
            lens: lens.to_vec(),
            weights,
        };
        self.push_op("segment_pool", out, op, &[logits, x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(TensorError::TapeOff);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::ConstantLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let out = node.value.get();
            self.propagate(&node.op, out, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params = Vec::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(p) = node.op {
                params.push((p, id));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let buf = self.grad_buf(grads, *a);
                    gemm_nt(g, tb.values(), buf, m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let buf = self.grad_buf(grads, *b);
                    gemm_tn(ta.values(), g, buf, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().0;
                if self.requires_grad(*a) {
                    // dA = dC * B
                    let buf = self.grad_buf(grads, *a);
                    gemm_nn(g, tb.values(), buf, m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = dC^T * A
                    let buf = self.grad_buf(grads, *b);
                    gemm_tn(g, ta.values(), buf, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let buf = self.grad_buf(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        let buf = self.grad_buf(grads, *v);
                        buf.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let buf = self.grad_buf(grads, *a);
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.requires_grad(*b) {
                    let buf = self.grad_buf(grads, *b);
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let other = self.value(*b).values();
                    let buf = self.grad_buf(grads, *a);
                    for ((d, x), o) in buf.iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
                if self.requires_grad(*b) {
                    let other = self.value(*a).values();
                    let buf = self.grad_buf(grads, *b);
                    for ((d, x), o) in buf.iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let buf = self.grad_buf(grads, *a);
                buf.iter_mut().zip(g).for_each(|(d, x)| *d += x * c);
            }
            Op::Softmax(a) => {
                let cols = last_dim(out);
                let y = out.values();
                let buf = self.grad_buf(grads, *a);
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(buf.chunks_mut(cols)) {
                    let s = dot(yr, gr);
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = last_dim(out);
                let y = out.values();
                let buf = self.grad_buf(grads, *a);
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(buf.chunks_mut(cols)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += gi - yi.exp() * s;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).values();
                let buf = self.grad_buf(grads, *a);
                for ((d, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
            Op::Exp(a) => {
                let buf = self.grad_buf(grads, *a);
                for ((d, gi), yi) in buf.iter_mut().zip(g).zip(out.values()) {
                    *d += gi * yi;
                }
            }
            Op::Tanh(a) => {
                let buf = self.grad_buf(grads, *a);
                for ((d, gi), yi) in buf.iter_mut().zip(g).zip(out.values()) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Sum(a) => {
                let buf = self.grad_buf(grads, *a);
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let buf = self.grad_buf(grads, *a);
                let n = buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::ConcatCols(parts) => {
                let total = last_dim(out);
                let rows = out.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(self.value(*p));
                    if self.requires_grad(*p) {
                        let buf = self.grad_buf(grads, *p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.requires_grad(*p) {
                        let buf = self.grad_buf(grads, *p);
                        buf.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, x)| *d += x);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(table, idx) => {
                let cols = last_dim(out);
                let buf = self.grad_buf(grads, *table);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * cols..(r + 1) * cols];
                    buf[i * cols..(i + 1) * cols].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            }
            Op::SliceCols(a, start) => {
                let width = last_dim(out);
                let cols = last_dim(self.value(*a));
                let rows = out.len() / width;
                let buf = self.grad_buf(grads, *a);
                for r in 0..rows {
                    let dst = &mut buf[r * cols + start..r * cols + start + width];
                    dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(d, x)| *d += x);
                }
            }
            Op::MaskedFill(a, mask) => {
                let buf = self.grad_buf(grads, *a);
                for ((d, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gi;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let buf = self.grad_buf(grads, *a);
                for ((d, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::RepeatRows(a) => {
                let n = last_dim(out);
                let buf = self.grad_buf(grads, *a);
                for row in g.chunks(n) {
                    buf.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
            }
            Op::Reshape(a) => {
                let buf = self.grad_buf(grads, *a);
                buf.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Select(a, index) => {
                let buf = self.grad_buf(grads, *a);
                buf[*index] += g[0];
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                lens,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q).values(), self.value(*k).values(), self.value(*v).values());
                let d = last_dim(out);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut da = Vec::new();
                let (mut r0, mut p0) = (0, 0);
                for &len in lens {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let a = &probs[p0..p0 + len * len];
                        let row = |r: usize| (r0 + r) * d + c0..(r0 + r) * d + c0 + dh;
                        da.clear();
                        for i in 0..len {
                            let gi = &g[row(i)];
                            for j in 0..len {
                                da.push(dot(gi, &vv[row(j)]));
                                let w = a[i * len + j];
                                for (x, y) in dv[row(j)].iter_mut().zip(gi) {
                                    *x += w * y;
                                }
                            }
                        }
                        for i in 0..len {
                            let ar = &a[i * len..(i + 1) * len];
                            let dr = &mut da[i * len..(i + 1) * len];
                            let s = dot(ar, dr);
                            for (x, w) in dr.iter_mut().zip(ar) {
                                *x = w * (*x - s) * scale;
                            }
                        }
                        for i in 0..len {
                            for j in 0..len {
                                let dl = da[i * len + j];
                                if dl == 0.0 {
                                    continue;
                                }
                                let (ri, rj) = (row(i), row(j));
                                for (x, y) in dq[ri.clone()].iter_mut().zip(&kv[rj.clone()]) {
                                    *x += dl * y;
                                }
                                for (x, y) in dk[rj].iter_mut().zip(&qv[ri]) {
                                    *x += dl * y;
                                }
                            }
                        }
                        p0 += len * len;
                    }
                    r0 += len;
                }
                for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                    if self.requires_grad(*var) {
                        let buf = self.grad_buf(grads, *var);
                        buf.iter_mut().zip(&local).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::SegmentPool {
                logits,
                x,
                lens,
                weights,
            } => {
                let xv = self.value(*x).values();
                let d = last_dim(out);
                if self.requires_grad(*x) {
                    let buf = self.grad_buf(grads, *x);
                    let mut r0 = 0;
                    for (s, &len) in lens.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for i in r0..r0 + len {
                            for (a, b) in buf[i * d..(i + 1) * d].iter_mut().zip(gs) {
                                *a += weights[i] * b;
                            }
                        }
                        r0 += len;
                    }
                }
                if self.requires_grad(*logits) {
                    let buf = self.grad_buf(grads, *logits);
                    let mut r0 = 0;
                    for (s, &len) in lens.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        let dw: Vec<f64> = (r0..r0 + len).map(|i| dot(gs, &xv[i * d..(i + 1) * d])).collect();
                        let mean = dot(&weights[r0..r0 + len], &dw);
                        for (i, dwi) in (r0..r0 + len).zip(&dw) {
                            buf[i] += weights[i] * (dwi - mean);
                        }
                        r0 += len;
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn check_segments(op: &'static str, lens: &[usize], rows: usize) -> Result<()> {
    if lens.is_empty() || lens.contains(&0) || lens.iter().sum::<usize>() != rows {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("segment lengths {lens:?} do not partition {rows} rows"),
        });
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss through differentiable ops.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `index`, summed over every binding of it.
    pub fn param(&self, index: usize) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for &(p, node) in &self.params {
            if p != index {
                continue;
            }
            if let Some(g) = self.grads[node].as_ref() {
                match acc.as_mut() {
                    Some(a) => a.iter_mut().zip(g).for_each(|(d, x)| *d += x),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// `(parameter index, gradient)` for every bound parameter that received
    /// one, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_deref().map(|g| (p, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let a = g.leaf(t2(2, 2, &[1.5, -2.0, 0.25, 7.0])).unwrap();
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c).values(), g.value(a).values());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(vec![0.0; 3])).unwrap();
        let s = g.softmax(z).unwrap();
        for v in g.value(s).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let mut g = Graph::new();
        let table: Vec<f64> = (0..15).map(|x| x as f64).collect();
        let t = g.leaf(t2(5, 3, &table)).unwrap();
        let e = g.embedding_lookup(t, &[4, 0]).unwrap();
        assert_eq!(g.shape(e), &[2, 3]);
        assert_eq!(g.value(e).values(), &[12.0, 13.0, 14.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::row(vec![1.0, f64::NAN])).is_err());
        let big = g.leaf(Tensor::row(vec![1000.0])).unwrap();
        assert_eq!(g.exp(big), Err(TensorError::NonFinite { op: "exp" }));
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
        assert_eq!(grads.wrt(s).unwrap(), &[1.0]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        let grads = g.backward(m).unwrap();
        let expect = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in grads.wrt(x).unwrap().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        assert_eq!(g.backward(c).unwrap_err(), TensorError::ConstantLoss);
        let mut off = Graph::no_grad();
        let y = off.leaf(Tensor::scalar(1.0)).unwrap();
        assert_eq!(off.backward(y).unwrap_err(), TensorError::TapeOff);
    }

    #[test]
    fn reuse_accumulates_exactly() {
        // loss = sum(x * w) + sum(x * v) uses x twice
        let xv = Tensor::row(vec![0.3, -1.2, 2.5]);
        let w = Tensor::row(vec![1.5, 0.5, -0.25]);
        let v = Tensor::row(vec![-2.0, 4.0, 0.125]);

        let single = |other: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone()).unwrap();
            let o = g.constant(other.clone()).unwrap();
            let p = g.mul(x, o).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap().wrt(x).unwrap().to_vec()
        };
        let gw = single(&w);
        let gv = single(&v);

        let mut g = Graph::new();
        let x = g.leaf(xv.clone()).unwrap();
        let wc = g.constant(w).unwrap();
        let vc = g.constant(v).unwrap();
        let a = g.mul(x, wc).unwrap();
        let b = g.mul(x, vc).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let total = g.add(sa, sb).unwrap();
        let both = g.backward(total).unwrap().wrt(x).unwrap().to_vec();
        for i in 0..3 {
            assert_eq!(both[i], gw[i] + gv[i]);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        // only the non-detached factor contributes
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
        assert!(grads.wrt(d).is_none());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut rng = Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![1, 1000], 1.0)).unwrap();
        let y = g.dropout(x, 0.2, &mut rng).unwrap();
        let vals = g.value(y).values();
        assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-15));
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        assert!((700..900).contains(&kept));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        // rate 0 is the identity and records nothing
        let n = g.len();
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(g.len(), n);
    }

    #[test]
    fn masked_fill_blocks_masked_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let m = g.masked_fill(x, &[false, true, false], -1e9).unwrap();
        assert_eq!(g.value(m).values(), &[1.0, -1e9, 3.0]);
        let sm = g.softmax(m).unwrap();
        assert_eq!(g.value(sm).values()[1], 0.0);
        let s = g.select(sm, 0).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap()[1], 0.0);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(!g.requires_grad(x));
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn param_gradients_sum_over_bindings() {
        let p = Tensor::row(vec![1.0, -1.0]);
        let mut g = Graph::new();
        let a = g.param(0, &p);
        let b = g.param(0, &p);
        let s1 = g.sum(a).unwrap();
        let s2 = g.sum(b).unwrap();
        let total = g.add(s1, s2).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.param(0).unwrap(), vec![2.0, 2.0]);
        assert!(grads.param(1).is_none());
    }
}
