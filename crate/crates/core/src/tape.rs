//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! immediately and stored alongside the rule needed to push gradients back to
//! the inputs. Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! Values are held behind `Arc` so large constant inputs (the geometric
//! embeddings are `M̂²×d_t`) can be placed on a tape without copying.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    SumAll(Var),
    MaxPoolGroups(Var, Vec<usize>),
    GeoScores(Var, Var),
    LseRows(Var),
    LseCols(Var),
    MaskedLseRows(Var, Vec<bool>),
    RowNormalize(Var, Vec<f64>),
    Augment(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn lse(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + 1·row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {:?} onto {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let c = x.cols();
        let mut out = x.clone().as_matrix();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a + col·1ᵀ`, broadcasting an `m×1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != x.rows() {
            return Err(Error::Dimension(format!(
                "add_col: {:?} onto {:?}",
                cv.shape(),
                x.shape()
            )));
        }
        let c = x.cols();
        let mut out = x.clone().as_matrix();
        for (chunk, b) in out.data_mut().chunks_mut(c).zip(cv.data()) {
            for o in chunk.iter_mut() {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::AddCol(a, col), rg))
    }

    /// Column-wise scaling by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension(format!(
                "mul_row: {:?} onto {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let c = x.cols();
        let mut out = x.clone().as_matrix();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} of {:?}",
                x.shape()
            )));
        }
        let v = x.slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
            return Err(Error::Dimension(format!(
                "gather_rows: bad index set for {} rows",
                x.rows()
            )));
        }
        let v = x.select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Collects entries `(i, j)` into a `1×n` row.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        if idx.is_empty() || idx.iter().any(|&(i, j)| i >= x.rows() || j >= x.cols()) {
            return Err(Error::Dimension("gather_elems: bad index set".into()));
        }
        let v: Vec<f64> = idx.iter().map(|&(i, j)| x.get(i, j)).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(1, idx.len(), v),
            Op::GatherElems(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization `(x − μ)/√(σ² + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone().as_matrix();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows(a, inv_std), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    /// `log(1 + eˣ)`, overflow-safe.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Channel-wise max over consecutive groups of `group` rows:
    /// `(G·group)×d → G×d`. Ties resolve to the first row of the group.
    pub fn max_pool_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || x.rows() % group != 0 {
            return Err(Error::Dimension(format!(
                "max_pool_groups: {} rows not divisible by {group}",
                x.rows()
            )));
        }
        let (g, d) = (x.rows() / group, x.cols());
        let mut out = Vec::with_capacity(g * d);
        let mut arg = Vec::with_capacity(g * d);
        for gi in 0..g {
            for c in 0..d {
                let mut best = gi * group;
                let mut bv = x.get(best, c);
                for r in gi * group + 1..(gi + 1) * group {
                    let v = x.get(r, c);
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(g, d, out),
            Op::MaxPoolGroups(a, arg),
            rg,
        ))
    }

    /// Pair-specific score term: `e[i][j] = q_i · rw_{i·N + j}` for
    /// `q: M×h` and `rw: (M·N)×h`.
    pub fn geo_scores(&mut self, q: Var, rw: Var) -> Result<Var> {
        let (qv, rv) = (self.value(q), self.value(rw));
        let (m, h) = (qv.rows(), qv.cols());
        if rv.cols() != h || rv.rows() % m != 0 {
            return Err(Error::Dimension(format!(
                "geo_scores: q {:?} vs embedding {:?}",
                qv.shape(),
                rv.shape()
            )));
        }
        let n = rv.rows() / m;
        let (qd, rd) = (qv.data(), rv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let qi = &qd[i * h..(i + 1) * h];
            for j in 0..n {
                let r = &rd[(i * n + j) * h..(i * n + j + 1) * h];
                out[i * n + j] = qi.iter().zip(r).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(q) || self.rg(rw);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::GeoScores(q, rw), rg))
    }

    /// Row-wise log-sum-exp, `m×n → m×1`.
    pub fn lse_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v: Vec<f64> = (0..x.rows()).map(|i| lse(x.row(i))).collect();
        let rg = self.rg(a);
        let m = v.len();
        self.push(Tensor::from_vec(m, 1, v), Op::LseRows(a), rg)
    }

    /// Column-wise log-sum-exp, `m×n → 1×n`.
    pub fn lse_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut v = Vec::with_capacity(n);
        let mut col = vec![0.0; m];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = x.get(i, j);
            }
            v.push(lse(&col));
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(1, n, v), Op::LseCols(a), rg)
    }

    /// Row-wise log-sum-exp over the entries where `mask` is set; rows with
    /// no selected entry yield `-∞`.
    pub fn masked_lse_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::Dimension("masked_lse_rows: mask size".into()));
        }
        let c = x.cols();
        let mut v = Vec::with_capacity(x.rows());
        let mut buf = Vec::with_capacity(c);
        for i in 0..x.rows() {
            buf.clear();
            for j in 0..c {
                if mask[i * c + j] {
                    buf.push(x.get(i, j));
                }
            }
            v.push(lse(&buf));
        }
        let rg = self.rg(a);
        let m = v.len();
        Ok(self.push(
            Tensor::from_vec(m, 1, v),
            Op::MaskedLseRows(a, mask.to_vec()),
            rg,
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone().as_matrix();
        let mut norms = Vec::with_capacity(x.rows());
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroRow { row: i });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowNormalize(a, norms), rg))
    }

    /// Appends one row and one column filled with the scalar `alpha`.
    pub fn augment(&mut self, cost: Var, alpha: Var) -> Result<Var> {
        let (c, a) = (self.value(cost), self.value(alpha));
        if a.len() != 1 {
            return Err(Error::Dimension("augment: alpha must be scalar".into()));
        }
        let (n, m) = (c.rows(), c.cols());
        let av = a.data()[0];
        let mut out = Vec::with_capacity((n + 1) * (m + 1));
        for i in 0..n {
            out.extend_from_slice(c.row(i));
            out.push(av);
        }
        out.extend(std::iter::repeat_n(av, m + 1));
        let rg = self.rg(cost) || self.rg(alpha);
        Ok(self.push(
            Tensor::from_vec(n + 1, m + 1, out),
            Op::Augment(cost, alpha),
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        let g = if g.shape() == self.value(v).shape() {
            g
        } else {
            g.reshape(self.value(v).shape().to_vec())
                .expect("gradient size matches node")
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b)).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b)).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(self.value(*a)).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)).unwrap());
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*r) {
                    self.accumulate(grads, *r, g.col_sums());
                }
            }
            Op::AddCol(a, c) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*c) {
                    self.accumulate(grads, *c, g.row_sums());
                }
            }
            Op::MulRow(a, r) => {
                let (x, rv) = (self.value(*a), self.value(*r));
                let c = x.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(c) {
                        for (o, b) in chunk.iter_mut().zip(rv.data()) {
                            *o *= b;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*r) {
                    self.accumulate(grads, *r, g.mul(x).unwrap().col_sums());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SliceCols(a, s, e) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let w = e - s;
                for i in 0..x.rows() {
                    for j in 0..w {
                        ga.set(i, s + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.rows(), c);
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row(r);
                    let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherElems(a, idx) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (k, &(i, j)) in idx.iter().enumerate() {
                    let v = ga.get(i, j) + g.data()[k];
                    ga.set(i, j, v);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut ga = g.clone().as_matrix();
                for (gr, yr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let c = y.cols();
                let n = c as f64;
                let mut ga = g.clone().as_matrix();
                for ((gr, yr), is) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = is * (*gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(y).unwrap()),
            Op::Log(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gv /= xv;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let mut ga = g.clone();
                for (gv, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                    *gv /= 2.0 * yv;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gv *= sigmoid(*xv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let ga = Tensor::full(x.rows(), x.cols(), g.data()[0]);
                self.accumulate(grads, *a, ga);
            }
            Op::MaxPoolGroups(a, arg) => {
                let x = self.value(*a);
                let d = x.cols();
                let mut ga = Tensor::zeros(x.rows(), d);
                for (k, &r) in arg.iter().enumerate() {
                    let c = k % d;
                    let v = ga.get(r, c) + g.data()[k];
                    ga.set(r, c, v);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GeoScores(q, rw) => {
                let (qv, rv) = (self.value(*q), self.value(*rw));
                let (m, h) = (qv.rows(), qv.cols());
                let n = rv.rows() / m;
                let gd = g.data();
                if self.rg(*q) {
                    let mut gq = vec![0.0; m * h];
                    for i in 0..m {
                        let gqi = &mut gq[i * h..(i + 1) * h];
                        for j in 0..n {
                            let w = gd[i * n + j];
                            let r = &rv.data()[(i * n + j) * h..(i * n + j + 1) * h];
                            for (o, rr) in gqi.iter_mut().zip(r) {
                                *o += w * rr;
                            }
                        }
                    }
                    self.accumulate(grads, *q, Tensor::from_vec(m, h, gq));
                }
                if self.rg(*rw) {
                    let mut gr = vec![0.0; m * n * h];
                    for i in 0..m {
                        let qi = &qv.data()[i * h..(i + 1) * h];
                        for j in 0..n {
                            let w = gd[i * n + j];
                            let o = &mut gr[(i * n + j) * h..(i * n + j + 1) * h];
                            for (ov, qq) in o.iter_mut().zip(qi) {
                                *ov = w * qq;
                            }
                        }
                    }
                    self.accumulate(grads, *rw, Tensor::from_vec(m * n, h, gr));
                }
            }
            Op::LseRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = x.clone().as_matrix();
                for (i, row) in ga.data_mut().chunks_mut(c).enumerate() {
                    let (l, gi) = (y.data()[i], g.data()[i]);
                    for v in row.iter_mut() {
                        *v = gi * (*v - l).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LseCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = x.clone().as_matrix();
                for row in ga.data_mut().chunks_mut(c) {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = g.data()[j] * (*v - y.data()[j]).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedLseRows(a, mask) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.rows(), c);
                for i in 0..x.rows() {
                    let l = y.data()[i];
                    if l == f64::NEG_INFINITY {
                        continue;
                    }
                    let gi = g.data()[i];
                    for j in 0..c {
                        if mask[i * c + j] {
                            ga.set(i, j, gi * (x.get(i, j) - l).exp());
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a, norms) => {
                let c = y.cols();
                let mut ga = g.clone().as_matrix();
                for ((gr, yr), n) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = (*gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Augment(cost, alpha) => {
                let (n, m) = (y.rows() - 1, y.cols() - 1);
                if self.rg(*cost) {
                    let gc = Tensor::from_fn(n, m, |i, j| g.get(i, j));
                    self.accumulate(grads, *cost, gc);
                }
                if self.rg(*alpha) {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += g.get(i, m);
                    }
                    for j in 0..=m {
                        s += g.get(n, j);
                    }
                    self.accumulate(grads, *alpha, Tensor::scalar(s));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let rep = check(inputs, DEFAULT_STEP, f).unwrap();
        assert!(rep.max_rel_error() < 1e-6, "rel errors {:?}", rep.rel_errors);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let a = t.param(Tensor::full(2, 3, 0.7));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &Tensor::full(2, 3, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, 3, 4);
        let b = rand_t(&mut rng, 4, 2);
        let mut t = Tape::new();
        let va = t.param(a);
        let vb = t.constant(b.clone());
        let p = t.matmul(va, vb).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let expect = Tensor::full(3, 2, 1.0).matmul_nt(&b).unwrap();
        assert!(g.get(va).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let a = rand_t(&mut rng, 3, 4);
            let b = rand_t(&mut rng, 3, 4);
            let r = rand_t(&mut rng, 1, 4);
            let c = rand_t(&mut rng, 3, 1);
            let w = rand_t(&mut rng, 3, 3);
            assert_fd(&[a.clone(), b.clone(), r, c, w], |t, v| {
                let x = t.mul(v[0], v[1])?;
                let x = t.add_row(x, v[2])?;
                let x = t.add_col(x, v[3])?;
                let x = t.mul_row(x, v[2])?;
                let y = t.sub(x, v[1])?;
                let y = t.scale(y, 0.7);
                let y = t.add_scalar(y, 0.3);
                let z = t.matmul_nt(y, v[0])?;
                let z = t.matmul(z, v[4])?;
                let zt = t.transpose(z);
                let q = t.add(z, zt)?;
                let e = t.exp(q);
                Ok(t.mean(e))
            });
        }
    }

    #[test]
    fn nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = rand_t(&mut rng, 4, 5);
            assert_fd(&[a], |t, v| {
                let s = t.softmax_rows(v[0]);
                let ln = t.layer_norm_rows(v[0], 1e-5);
                let lr = t.leaky_relu(v[0], 0.01);
                let sp = t.softplus(lr);
                let x = t.mul(s, ln)?;
                let x = t.add(x, sp)?;
                let sq = t.mul(v[0], v[0])?;
                let sq = t.add_scalar(sq, 1.0);
                let r = t.sqrt(sq);
                let l = t.log(r);
                let x = t.add(x, l)?;
                let nr = t.normalize_rows(v[0])?;
                let x = t.mul(x, nr)?;
                Ok(t.sum(x))
            });
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let a = rand_t(&mut rng, 6, 4);
            let q = rand_t(&mut rng, 3, 4);
            let alpha = rand_t(&mut rng, 1, 1);
            assert_fd(&[a, q, alpha], |t, v| {
                let s1 = t.slice_cols(v[0], 1, 3)?;
                let s2 = t.slice_cols(v[0], 0, 2)?;
                let c = t.concat_cols(&[s1, s2])?;
                let g = t.gather_rows(c, &[5, 0, 0, 2, 3, 1])?;
                let p = t.max_pool_groups(g, 2)?;
                let sc = t.geo_scores(v[1], g)?;
                let aug = t.augment(sc, v[2])?;
                let lr = t.lse_rows(aug);
                let lc = t.lse_cols(aug);
                let mask = [true, false, true, false, true, false, true, true, true, true, false, true];
                let ml = t.masked_lse_rows(aug, &mask)?;
                let e = t.gather_elems(aug, &[(0, 1), (2, 2), (0, 1)])?;
                let parts = [t.sum(p), t.sum(lr), t.sum(lc), t.sum(ml), t.sum(e)];
                let mut acc = parts[0];
                for &x in &parts[1..] {
                    acc = t.add(acc, x)?;
                }
                Ok(acc)
            });
        }
    }

    #[test]
    fn empty_masked_row_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::full(2, 2, 0.5));
        let m = t.masked_lse_rows(a, &[false, false, true, true]).unwrap();
        assert_eq!(t.value(m).get(0, 0), f64::NEG_INFINITY);
        let s = t.gather_elems(m, &[(1, 0)]).unwrap();
        let s = t.sum(s);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().row(0), &[0.0, 0.0]);
        assert!((g.get(a).unwrap().get(1, 0) - 0.5).abs() < 1e-15);
    }
}
