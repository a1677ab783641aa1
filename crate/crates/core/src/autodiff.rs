//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only computation record: every operation
//! evaluates eagerly and stores its output next to the operation that
//! produced it, so node indices are already a topological order. The
//! backward pass walks the record in reverse and accumulates gradients
//! only into nodes that (transitively) depend on a trainable leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows(Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Non-fatal conditions noticed while building the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// A masked cross-entropy had no selected positions and was defined as 0.
    EmptyMask { node: usize },
}

/// Layer-norm variance floor; a constant row normalizes to zeros.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    warnings: Vec<Warning>,
    fault: Option<Fault>,
}

/// Deliberate backward-pass bugs, used to check that gradient checking
/// catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the softmax input gradient.
    SoftmaxBackwardSign,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Applies `fault` to every later backward pass of this graph.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        if let Op::CrossEntropy { mask, .. } = &op {
            if !mask.iter().any(|&m| m) {
                self.warnings.push(Warning::EmptyMask {
                    node: self.nodes.len(),
                });
            }
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x, _)
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2NormalizeRows(x)
            | Op::Transpose(x)
            | Op::Reshape(x, _) => vec![*x],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    // ---- operations -------------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.apply(Op::AddRow(x, row))
    }

    /// `x[m×n] * col[m×1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.apply(Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax(x, axis))
    }

    /// Row-wise layer normalization with gain and bias of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { x, gain, bias })
    }

    /// Gathers rows `ids` of `table[V×d]` into an `n×d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×K]`, averaged over rows where `mask` is set. An empty
    /// mask yields 0 and records [`Warning::EmptyMask`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.apply(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
        })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows {
            x,
            idx: idx.to_vec(),
        })
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean(x))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2NormalizeRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(x, shape.to_vec()))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[1×n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- forward ----------------------------------------------------------

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => Err(Error::contract("leaf nodes are not evaluated")),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let (m, k) = expect_matrix("matmul", a)?;
                let (k2, n) = expect_matrix("matmul", b)?;
                if k != k2 {
                    return Err(Error::shape("matmul", a.shape(), b.shape()));
                }
                Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (val(a), val(b));
                let (m, k) = expect_matrix("matmul_nt", a)?;
                let (n, k2) = expect_matrix("matmul_nt", b)?;
                if k != k2 {
                    return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
                }
                let mut c = vec![0.0; m * n];
                kernels::matmul_nt_acc(a.data(), b.data(), &mut c, m, k, n);
                Tensor::matrix(m, n, c)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if ta.shape() != tb.shape() {
                    return Err(Error::shape("elementwise", ta.shape(), tb.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape(), data)
            }
            Op::AddRow(x, r) => {
                let (tx, tr) = (val(x), val(r));
                let n = tx.cols();
                if tr.len() != n || tx.ndim() != 2 {
                    return Err(Error::shape("add_row", tx.shape(), tr.shape()));
                }
                let mut out = tx.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, b) in row.iter_mut().zip(tr.data()) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (val(x), val(c));
                let (m, n) = expect_matrix("mul_col", tx)?;
                if tc.len() != m {
                    return Err(Error::shape("mul_col", tx.shape(), tc.shape()));
                }
                let mut out = tx.clone();
                for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
                    let s = tc.data()[i];
                    for o in row {
                        *o *= s;
                    }
                }
                Ok(out)
            }
            Op::Scale(x, c) => Ok(val(x).scale(*c)),
            Op::Gelu(x) => Ok(val(x).map(kernels::gelu)),
            Op::Sigmoid(x) => Ok(val(x).map(kernels::sigmoid)),
            Op::Softmax(x, axis) => {
                let t = val(x);
                if *axis >= t.ndim() {
                    return Err(Error::contract("softmax axis out of range"));
                }
                Tensor::new(t.shape(), kernels::softmax(t.data(), t.shape(), *axis))
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, g, b) = (val(x), val(gain), val(bias));
                let n = tx.cols();
                if g.len() != n || b.len() != n {
                    return Err(Error::shape("layer_norm", tx.shape(), g.shape()));
                }
                let mut out = tx.clone();
                for row in out.data_mut().chunks_mut(n) {
                    let (mean, rstd) = row_stats(row);
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = (*o - mean) * rstd * g.data()[j] + b.data()[j];
                    }
                }
                Ok(out)
            }
            Op::Embedding { table, ids } => {
                let t = val(table);
                let (v, d) = expect_matrix("embedding", t)?;
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Error::input(alloc::format!(
                            "embedding id {id} out of range for table of {v} rows"
                        )));
                    }
                    data.extend_from_slice(t.row_slice(id));
                }
                Tensor::matrix(ids.len(), d, data)
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let t = val(logits);
                let (n, k) = expect_matrix("cross_entropy", t)?;
                if targets.len() != n || mask.len() != n {
                    return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Ok(Tensor::scalar(0.0));
                }
                let mut lp = vec![0.0; k];
                let mut total = 0.0;
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    if targets[i] >= k {
                        return Err(Error::input("cross_entropy target out of range"));
                    }
                    kernels::log_softmax_row(t.row_slice(i), &mut lp);
                    total -= lp[targets[i]];
                }
                Ok(Tensor::scalar(total / count as f64))
            }
            Op::SliceCols { x, start, len } => {
                let t = val(x);
                let (m, n) = expect_matrix("slice_cols", t)?;
                if start + len > n {
                    return Err(Error::shape("slice_cols", t.shape(), &[start + len]));
                }
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&t.row_slice(i)[*start..start + len]);
                }
                Tensor::matrix(m, *len, data)
            }
            Op::ConcatCols(parts) => {
                let first = val(&parts[0]);
                let m = first.rows();
                let mut total = 0;
                for p in parts {
                    let t = val(p);
                    if t.ndim() != 2 || t.rows() != m {
                        return Err(Error::shape("concat_cols", first.shape(), t.shape()));
                    }
                    total += t.cols();
                }
                let mut data = Vec::with_capacity(m * total);
                for i in 0..m {
                    for p in parts {
                        data.extend_from_slice(val(p).row_slice(i));
                    }
                }
                Tensor::matrix(m, total, data)
            }
            Op::ConcatRows(parts) => {
                let first = val(&parts[0]);
                let n = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = val(p);
                    if t.ndim() != 2 || t.cols() != n {
                        return Err(Error::shape("concat_rows", first.shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, n, data)
            }
            Op::GatherRows { x, idx } => {
                let t = val(x);
                let (m, n) = expect_matrix("gather_rows", t)?;
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    if i >= m {
                        return Err(Error::contract(alloc::format!(
                            "row index {i} out of range for {m} rows"
                        )));
                    }
                    data.extend_from_slice(t.row_slice(i));
                }
                Tensor::matrix(idx.len(), n, data)
            }
            Op::MeanRows(x) => {
                let t = val(x);
                let (m, n) = expect_matrix("mean_rows", t)?;
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / m as f64;
                out.iter_mut().for_each(|o| *o *= inv);
                Tensor::matrix(1, n, out)
            }
            Op::Sum(x) => Ok(Tensor::scalar(val(x).sum())),
            Op::Mean(x) => {
                let t = val(x);
                Ok(Tensor::scalar(t.sum() / t.len() as f64))
            }
            Op::L2NormalizeRows(x) => {
                let t = val(x);
                let n = t.cols();
                let mut out = t.clone();
                for row in out.data_mut().chunks_mut(n) {
                    let norm = libm::sqrt(kernels::dot(row, row));
                    if norm == 0.0 || !norm.is_finite() {
                        return Err(Error::contract("cannot normalize a zero or non-finite vector"));
                    }
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Ok(out)
            }
            Op::Transpose(x) => {
                let t = val(x);
                expect_matrix("transpose", t)?;
                Ok(t.transpose())
            }
            Op::Reshape(x, shape) => val(x).reshape(shape),
        }
    }

    /// Re-evaluates every recorded operation from its saved inputs and
    /// reports whether each output is reproduced bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|node| match node.op {
            Op::Leaf => true,
            ref op => self
                .eval(op)
                .map(|t| t.bit_eq(&node.value))
                .unwrap_or(false),
        })
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `out` with respect to every node that depends
    /// on a trainable leaf.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let seed = Tensor::new(self.shape(out), vec![1.0])?;
        self.backward_seeded(&[(out, seed)])
    }

    /// Backward pass from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g.data(), tb.data(), &mut da, m, n, k);
                    add_grad(grads, a, ta.shape(), da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(ta.data(), g.data(), &mut db, m, k, n);
                    add_grad(grads, b, tb.shape(), db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_acc(g.data(), tb.data(), &mut da, m, n, k);
                    add_grad(grads, a, ta.shape(), da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(g.data(), ta.data(), &mut db, m, n, k);
                    add_grad(grads, b, tb.shape(), db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    add_grad(grads, a, g.shape(), g.data().to_vec());
                }
                if self.wants(b) {
                    add_grad(grads, b, g.shape(), g.data().to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_grad(grads, a, g.shape(), g.data().to_vec());
                }
                if self.wants(b) {
                    add_grad(grads, b, g.shape(), g.data().iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if self.wants(a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, a, ta.shape(), d);
                }
                if self.wants(b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, b, tb.shape(), d);
                }
            }
            &Op::AddRow(x, r) => {
                if self.wants(x) {
                    add_grad(grads, x, g.shape(), g.data().to_vec());
                }
                if self.wants(r) {
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_grad(grads, r, val(r).shape(), dr);
                }
            }
            &Op::MulCol(x, c) => {
                let (tx, tc) = (val(x), val(c));
                let n = tx.cols();
                if self.wants(x) {
                    let mut dx = g.data().to_vec();
                    for (r, row) in dx.chunks_mut(n).enumerate() {
                        let s = tc.data()[r];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    add_grad(grads, x, tx.shape(), dx);
                }
                if self.wants(c) {
                    let dc = (0..tx.rows())
                        .map(|r| kernels::dot(g.row_slice(r), tx.row_slice(r)))
                        .collect();
                    add_grad(grads, c, tc.shape(), dc);
                }
            }
            &Op::Scale(x, c) => {
                add_grad(grads, x, g.shape(), g.data().iter().map(|v| v * c).collect());
            }
            &Op::Gelu(x) => {
                let tx = val(x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                add_grad(grads, x, tx.shape(), d);
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                add_grad(grads, x, y.shape(), d);
            }
            &Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = kernels::split_axis(y.shape(), axis);
                let mut dx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut s = 0.0;
                        for a in 0..len {
                            s += gd[base + a * inner] * yd[base + a * inner];
                        }
                        for a in 0..len {
                            let p = base + a * inner;
                            dx[p] = yd[p] * (gd[p] - s);
                        }
                        if self.fault == Some(Fault::SoftmaxBackwardSign) {
                            for a in 0..len {
                                dx[base + a * inner] = -dx[base + a * inner];
                            }
                        }
                    }
                }
                add_grad(grads, x, y.shape(), dx);
            }
            &Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (val(x), val(gain));
                let n = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..tx.rows() {
                    let row = tx.row_slice(r);
                    let gr = g.row_slice(r);
                    let (mean, rstd) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * tg.data()[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(x) {
                    add_grad(grads, x, tx.shape(), dx);
                }
                if self.wants(gain) {
                    add_grad(grads, gain, tg.shape(), dg);
                }
                if self.wants(bias) {
                    add_grad(grads, bias, val(bias).shape(), db);
                }
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, g.row_slice(r), &mut dt[id * d..(id + 1) * d]);
                }
                add_grad(grads, *table, t.shape(), dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let t = val(*logits);
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return;
                }
                let k = t.cols();
                let scale = g.item() / count as f64;
                let mut dl = vec![0.0; t.len()];
                let mut lp = vec![0.0; k];
                for r in 0..t.rows() {
                    if !mask[r] {
                        continue;
                    }
                    kernels::log_softmax_row(t.row_slice(r), &mut lp);
                    let out = &mut dl[r * k..(r + 1) * k];
                    for j in 0..k {
                        out[j] = libm::exp(lp[j]) * scale;
                    }
                    out[targets[r]] -= scale;
                }
                add_grad(grads, *logits, t.shape(), dl);
            }
            &Op::SliceCols { x, start, len } => {
                let t = val(x);
                let n = t.cols();
                let mut dx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(g.row_slice(r));
                }
                add_grad(grads, x, t.shape(), dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            dp.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        add_grad(grads, p, t.shape(), dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    if self.wants(p) {
                        let dp = g.data()[offset..offset + t.len()].to_vec();
                        add_grad(grads, p, t.shape(), dp);
                    }
                    offset += t.len();
                }
            }
            Op::GatherRows { x, idx } => {
                let t = val(*x);
                let n = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    kernels::axpy(1.0, g.row_slice(r), &mut dx[i * n..(i + 1) * n]);
                }
                add_grad(grads, *x, t.shape(), dx);
            }
            &Op::MeanRows(x) => {
                let t = val(x);
                let inv = 1.0 / t.rows() as f64;
                let mut dx = Vec::with_capacity(t.len());
                for _ in 0..t.rows() {
                    dx.extend(g.data().iter().map(|v| v * inv));
                }
                add_grad(grads, x, t.shape(), dx);
            }
            &Op::Sum(x) => {
                let t = val(x);
                add_grad(grads, x, t.shape(), vec![g.item(); t.len()]);
            }
            &Op::Mean(x) => {
                let t = val(x);
                add_grad(grads, x, t.shape(), vec![g.item() / t.len() as f64; t.len()]);
            }
            &Op::L2NormalizeRows(x) => {
                let (tx, y) = (val(x), &node.value);
                let n = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    let xr = tx.row_slice(r);
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let norm = libm::sqrt(kernels::dot(xr, xr));
                    let proj = kernels::dot(gr, yr);
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                add_grad(grads, x, tx.shape(), dx);
            }
            &Op::Transpose(x) => {
                let t = val(x);
                add_grad(grads, x, t.shape(), g.transpose().into_data());
            }
            Op::Reshape(x, _) => {
                let t = val(*x);
                add_grad(grads, *x, t.shape(), g.data().to_vec());
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LAYER_NORM_EPS))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, data).expect("gradient shape follows value shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut g = Graph::new();
        let a = m(&[&[1., 2., 3.], &[4., 5., 6.], &[7., 8., 9.]]);
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1., 2.], &[3., 4.]]));
        let b = g.constant(m(&[&[0.], &[1.]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b).unwrap_err() {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let big = g.constant(Tensor::row(vec![1000.0, 0.0]));
        let s = g.softmax(big, 1).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] >= 0.0 && v[1] < 1e-300);
        assert!(g.value(s).is_finite());
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.softmax(z, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![3.0; 5]));
        let gain = g.constant(Tensor::row(vec![1.0; 5]));
        let bias = g.constant(Tensor::row(vec![0.0; 5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::row(vec![0.0, 0.0]));
        let ce = g.cross_entropy(l, &[0], &[true]).unwrap();
        assert!((g.value(ce).item() - core::f64::consts::LN_2).abs() < 1e-15);

        let l = g.constant(Tensor::row(vec![1e6, -1e6]));
        let ce = g.cross_entropy(l, &[0], &[true]).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);

        assert!(g.warnings().is_empty());
        let l = g.constant(Tensor::row(vec![1.0, 2.0]));
        let ce = g.cross_entropy(l, &[0], &[false]).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
        assert_eq!(g.warnings().len(), 1);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn leaves_get_gradients_of_identical_shape() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1., 2.], &[3., 4.]]));
        let b = g.param(m(&[&[0.5], &[-1.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[2, 2]);
        assert_eq!(grads.get(b).unwrap().shape(), &[2, 1]);
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn replay_reproduces_outputs() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[0.3, -1.2], &[2.0, 0.1]]));
        let s = g.softmax(a, 1).unwrap();
        let t = g.gelu(s).unwrap();
        let n = g.l2_normalize_rows(t).unwrap();
        let _ = g.mean(n).unwrap();
        assert!(g.replay_matches());
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::Contract(_))));
    }
}
