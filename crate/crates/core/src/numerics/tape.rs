//! Reverse-mode differentiation over a linear record of operations.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations return [`Var`] handles; [`Tape::backward`] consumes the tape
//! and walks the record once in reverse, returning gradients for parameters
//! and for leaves created with `requires_grad`.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Result, VsdError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    /// Constant, detached value or grad-requiring leaf.
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    RelativeBias {
        table: Var,
        index: Vec<usize>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: Vec<Option<Var>>,
    params_require_grad: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(VsdError::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_t_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn matmul_tn_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'s> Tape<'s> {
    /// A tape with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            params_require_grad: false,
        }
    }

    /// A training tape: parameters participate in differentiation.
    pub fn with_params(store: &'s ParamStore) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            store: Some(store),
            param_vars: vec![None; store.len()],
            params_require_grad: true,
        }
    }

    /// An inference tape: parameters are read-only and nothing is recorded
    /// for the backward pass.
    pub fn inference(store: &'s ParamStore) -> Self {
        Tape {
            params_require_grad: false,
            ..Tape::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("param node without a store")
                .value(*id),
            (None, _) => unreachable!("non-param node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params_require_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(VsdError::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), m, k, tb.data(), n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_t")?;
        let (n, k2) = dims2(tb, "matmul_t")?;
        if k != k2 {
            return Err(VsdError::shape("matmul_t", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(ta.data(), m, k, tb.data(), n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(VsdError::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    /// Adds a rank-1 `bias[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || ta.cols() != tb.len() {
            return Err(VsdError::shape("add_row", ta.shape(), tb.shape()));
        }
        let n = tb.len();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(VsdError::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Relu(a), rg)
    }

    /// Inverted dropout with keep-probability `1 - p`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(a, m)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(x, o);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Softmax along the last axis where `mask[i*cols + j] == false` positions
    /// get exactly zero weight. A row with no allowed position is an error.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(VsdError::shape("masked_softmax", ta.shape(), &[mask.len()]));
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (r, ((x, o), mrow)) in ta
            .data()
            .chunks(c)
            .zip(out.chunks_mut(c))
            .zip(mask.chunks(c))
            .enumerate()
        {
            let max = x
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(VsdError::FullyMaskedRow { row: r });
            }
            let mut sum = 0.0;
            for ((o, &v), &m) in o.iter_mut().zip(x).zip(mrow) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in o.iter_mut() {
                *o /= sum;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in o.iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(VsdError::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let xr = &tx.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let n = (xr[j] - mean) * is;
                normed[r * c + j] = n;
                out[r * c + j] = n * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows `ids` from `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims2(tt, "embedding")?;
        if ids.is_empty() {
            return Err(VsdError::InvalidInput("embedding of an empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(VsdError::UnknownToken { id, vocab: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| VsdError::InvalidInput("concat of zero tensors".into()))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c2) = dims2(t, "concat_rows")?;
            if c2 != c {
                return Err(VsdError::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| VsdError::InvalidInput("concat of zero tensors".into()))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r2, c) = dims2(t, "concat_cols")?;
            if r2 != r {
                return Err(VsdError::shape("concat_cols", self.shape(first), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(VsdError::shape("slice_rows", t.shape(), &[start, len]));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(VsdError::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(VsdError::shape("reshape", t.shape(), shape));
        }
        // A zero-offset slice over all rows carries the gradient unchanged.
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start: 0 }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[m, V]`. `None` targets are padding and excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = dims2(t, "cross_entropy")?;
        if targets.len() != m {
            return Err(VsdError::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(VsdError::InvalidInput(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = t.row(i);
            softmax_row(row, &mut probs[i * v..(i + 1) * v]);
            if let Some(y) = *target {
                if y >= v {
                    return Err(VsdError::InvalidInput(format!(
                        "cross_entropy: class {y} out of range for {v} classes"
                    )));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Builds a `[len_q, len_k]` matrix whose entry `(i, j)` is
    /// `table[clamp(j - i, -max_dist, max_dist) + max_dist]`.
    pub fn relative_bias(&mut self, table: Var, len_q: usize, len_k: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 1 || t.len() % 2 == 0 {
            return Err(VsdError::shape("relative_bias", t.shape(), &[len_q, len_k]));
        }
        let max_dist = (t.len() / 2) as isize;
        let mut index = Vec::with_capacity(len_q * len_k);
        let mut out = Vec::with_capacity(len_q * len_k);
        for i in 0..len_q as isize {
            for j in 0..len_k as isize {
                let k = ((j - i).clamp(-max_dist, max_dist) + max_dist) as usize;
                index.push(k);
                out.push(t.data()[k]);
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![len_q, len_k], out),
            Op::RelativeBias { table, index },
            rg,
        ))
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Consumes the tape and returns gradients of the scalar `loss` with
    /// respect to every parameter and every grad-requiring leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(VsdError::Autodiff(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(VsdError::Autodiff(
                "backward: loss is detached from every grad-requiring input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, Tensor::from_parts(self.shape_of(Var(idx)), g));
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        matmul_t_into(&g, m, n, tb.data(), k, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        matmul_tn_into(ta.data(), m, k, &g, n, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        matmul_into(&g, m, n, tb.data(), k, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, n * k);
                        matmul_tn_into(&g, m, n, ta.data(), k, gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            add_into(slot(&mut grads, v, g.len()), &g, 1.0);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.requires_grad(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g, 1.0);
                    }
                    if self.requires_grad(*bias) {
                        let n = self.value(*bias).len();
                        let gb = slot(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            add_into(gb, row, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for ((d, gv), bv) in ga.iter_mut().zip(&g).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, g.len());
                        for ((d, gv), av) in gb.iter_mut().zip(&g).zip(ta.data()) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, *s);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, gv), x) in ga.iter_mut().zip(&g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let c = y.cols();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().expect("log_softmax value");
                    let c = y.cols();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let c = tg.len();
                    if self.requires_grad(*gain) {
                        let gg = slot(&mut grads, *gain, c);
                        for (gr, nr) in g.chunks(c).zip(normed.chunks(c)) {
                            for ((d, gv), nv) in gg.iter_mut().zip(gr).zip(nr) {
                                *d += gv * nv;
                            }
                        }
                    }
                    if self.requires_grad(*bias) {
                        let gb = slot(&mut grads, *bias, c);
                        for gr in g.chunks(c) {
                            add_into(gb, gr, 1.0);
                        }
                    }
                    if self.requires_grad(*x) {
                        let gx = slot(&mut grads, *x, g.len());
                        let mut dn = vec![0.0; c];
                        for (r, ((gr, nr), dr)) in g
                            .chunks(c)
                            .zip(normed.chunks(c))
                            .zip(gx.chunks_mut(c))
                            .enumerate()
                        {
                            for j in 0..c {
                                dn[j] = gr[j] * tg.data()[j];
                            }
                            let mean_dn = dn.iter().sum::<f64>() / c as f64;
                            let mean_dn_n =
                                dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                dr[j] += inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = slot(&mut grads, *table, tt.len());
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row, 1.0);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.requires_grad(p) {
                            add_into(slot(&mut grads, p, n), &g[offset..offset + n], 1.0);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                    let mut col = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let (r, c) = (t.rows(), t.cols());
                        if self.requires_grad(p) {
                            let gp = slot(&mut grads, p, r * c);
                            for i in 0..r {
                                add_into(
                                    &mut gp[i * c..(i + 1) * c],
                                    &g[i * total + col..i * total + col + c],
                                    1.0,
                                );
                            }
                        }
                        col += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let t = self.value(*x);
                    let c = t.cols();
                    let n = t.len();
                    let gx = slot(&mut grads, *x, n);
                    add_into(&mut gx[start * c..start * c + g.len()], &g, 1.0);
                }
                Op::SliceCols { x, start } => {
                    let t = self.value(*x);
                    let (r, c) = (t.rows(), t.cols());
                    let len = g.len() / r;
                    let gx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                            1.0,
                        );
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = slot(&mut grads, *x, n);
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gx = slot(&mut grads, *x, n);
                    for d in gx.iter_mut() {
                        *d += g[0] / n as f64;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (i, target) in targets.iter().enumerate() {
                        if let Some(y) = *target {
                            let row = &mut gl[i * v..(i + 1) * v];
                            for (d, p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                                *d += scale * p;
                            }
                            row[y] -= scale;
                        }
                    }
                }
                Op::RelativeBias { table, index } => {
                    let n = self.value(*table).len();
                    let gt = slot(&mut grads, *table, n);
                    for (gv, &k) in g.iter().zip(index) {
                        gt[k] += gv;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a grad-requiring leaf; `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}
