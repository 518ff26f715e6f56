//! Operation tape and reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already live on the tape, so node
//! order is a topological order and the backward sweep is a single reverse
//! pass. Tensors are viewed as matrices (see [`Tensor`]); binary elementwise
//! ops broadcast their right operand when it is a single row or a scalar.

use std::collections::HashMap;

use crate::error::{invalid, mismatch, AutodiffError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Added under the square root when differentiating a Euclidean distance so
/// the gradient stays finite at zero separation.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce (or normalise) down each column, across rows.
    Rows,
    /// Reduce (or normalise) along each row, across columns.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var, Axis),
    Mean(Var, Axis),
    SumAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, Axis),
    L2Normalize(Var),
    NormalizeSum(Var),
    Distance(Var, Var),
    PairwiseDistance(Var, Var),
    MaxConst(Var, F),
    Scale(Var, F),
    AddConst(Var, F),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
}

struct Node<F> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<F>>,
    op: Op<F>,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p, F> {
    params: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape with no parameter store; only constants can be leaves.
    pub fn without_params() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param tape").value(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(
            self.params.is_some_and(|p| id.index() < p.len()),
            "parameter {id:?} is not in this tape's store"
        );
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return mismatch("matmul", ta.shape(), tb.shape());
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.contains(&0) {
            return mismatch("reshape", t.shape(), shape);
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    // ---- elementwise binary --------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() == tb.rows() && ta.cols() == tb.cols() {
            Ok(Bcast::Same)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else {
            mismatch(op, ta.shape(), tb.shape())
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, Bcast)> {
        let bc = self.bcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[bc.index(i, cols)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, bc)))
    }

    // ---- shape manipulation ---------------------------------------------

    /// Concatenates along the last axis; every input must have the same row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return invalid("concat", "no inputs");
        }
        let rows = self.value(xs[0]).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return mismatch("concat", self.value(xs[0]).shape(), self.value(x).shape());
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out), Op::Concat(xs.to_vec())))
    }

    /// Stacks inputs vertically; every input must have the same column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return invalid("concat_rows", "no inputs");
        }
        let cols = self.value(xs[0]).cols();
        let mut out = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return mismatch("concat_rows", self.value(xs[0]).shape(), t.shape());
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.cols() {
            return invalid("slice_cols", format!("[{start}, {}) outside {:?}", start + len, t.shape()));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rows = t.rows();
        Ok(self.push(Tensor::matrix(rows, len, out), Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows() {
            return invalid("slice_rows", format!("[{start}, {}) outside {:?}", start + len, t.shape()));
        }
        let c = t.cols();
        let out = t.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, out), Op::SliceRows(x, start)))
    }

    /// Row `i` as a `1 x cols` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    /// Selects rows by index (repeats allowed): `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() {
            return invalid("gather_rows", "empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return invalid("gather_rows", format!("row {bad} outside {:?}", t.shape()));
        }
        let mut out = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let cols = t.cols();
        Ok(self.push(Tensor::matrix(idx.len(), cols, out), Op::Gather(x, idx.to_vec())))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        let t = reduce(self.value(x), axis, F::one());
        self.push(t, Op::Sum(x, axis))
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        let src = self.value(x);
        let n = match axis {
            Axis::Rows => src.rows(),
            Axis::Cols => src.cols(),
        };
        let t = reduce(src, axis, F::one() / F::of(n as f64));
        self.push(t, Op::Mean(x, axis))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        self.push(t, Op::Relu(x))
    }

    /// `max(x, c)` elementwise. The subgradient at `x == c` is zero.
    pub fn max_const(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v.max(c));
        self.push(t, Op::MaxConst(x, c))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddConst(x, c))
    }

    // ---- normalisations -------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let mut out = src.data().to_vec();
        for_each_group(r, c, axis, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for i in idx.clone() {
                out[i] = (out[i] - m).exp();
                z = z + out[i];
            }
            for i in idx {
                out[i] = out[i] / z;
            }
        });
        let t = Tensor::new(src.shape().to_vec(), out).unwrap();
        self.push(t, Op::Softmax(x, axis))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let c = src.cols();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n == F::zero() {
                return invalid("l2_normalize", "zero-norm row");
            }
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let t = Tensor::new(src.shape().to_vec(), out).unwrap();
        Ok(self.push(t, Op::L2Normalize(x)))
    }

    /// Divides each row by its sum, turning non-negative weights into a
    /// convex combination.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(src.cols()) {
            let s: F = row.iter().copied().sum();
            if s == F::zero() {
                return invalid("normalize_sum", "row sums to zero");
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let t = Tensor::new(src.shape().to_vec(), out).unwrap();
        Ok(self.push(t, Op::NormalizeSum(x)))
    }

    // ---- distances ------------------------------------------------------

    /// Euclidean distance between two tensors holding the same number of values.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return mismatch("distance", ta.shape(), tb.shape());
        }
        let d = sq_dist(ta.data(), tb.data()).sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Distance(a, b)))
    }

    /// `[K, E] x [S, E] -> [K, S]` matrix of row-to-row Euclidean distances.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return mismatch("pairwise_distance", ta.shape(), tb.shape());
        }
        let (k, s) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(k * s);
        for i in 0..k {
            for j in 0..s {
                out.push(sq_dist(ta.row_slice(i), tb.row_slice(j)).sqrt());
            }
        }
        Ok(self.push(Tensor::matrix(k, s, out), Op::PairwiseDistance(a, b)))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let grads = self.sweep(loss)?;
        let n = self.params.map_or(0, |p| p.len());
        let mut by_param: Vec<Option<Tensor<F>>> = vec![None; n];
        for (&id, &v) in &self.param_vars {
            by_param[id.index()] = grads[v.0].clone();
        }
        Ok(Gradients { by_param })
    }

    /// Gradients of a scalar `loss` with respect to arbitrary nodes. Nodes the
    /// loss does not depend on get zeros.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<F>>> {
        let grads = self.sweep(loss)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
            })
            .collect())
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Tensor<F>>>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = || self.nodes[i].value.as_ref().unwrap();
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = slot(grads, *a, ta);
                gemm_bt_acc(g.data(), tb.data(), ga.data_mut(), m, n, k);
                let gb = slot(grads, *b, tb);
                gemm_at_acc(ta.data(), g.data(), gb.data_mut(), k, m, n);
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                slot(grads, *a, self.value(*a)).add_assign(g);
                let tb = self.value(*b);
                let cols = g.cols();
                let gb = slot(grads, *b, tb).data_mut();
                for (j, &gv) in g.data().iter().enumerate() {
                    let bi = bc.index(j, cols);
                    gb[bi] = gb[bi] + sign * gv;
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = g.cols();
                {
                    let ga = slot(grads, *a, ta).data_mut();
                    for (j, &gv) in g.data().iter().enumerate() {
                        ga[j] = ga[j] + gv * tb.data()[bc.index(j, cols)];
                    }
                }
                let gb = slot(grads, *b, tb).data_mut();
                for (j, &gv) in g.data().iter().enumerate() {
                    let bi = bc.index(j, cols);
                    gb[bi] = gb[bi] + gv * ta.data()[j];
                }
            }
            Op::Concat(xs) => {
                let total = g.cols();
                let mut offset = 0;
                for &x in xs {
                    let tx = self.value(x);
                    let c = tx.cols();
                    let gx = slot(grads, x, tx).data_mut();
                    for r in 0..tx.rows() {
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + g.data()[r * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let tx = self.value(x);
                    let n = tx.numel();
                    let gx = slot(grads, x, tx).data_mut();
                    for (a, &b) in gx.iter_mut().zip(&g.data()[offset..offset + n]) {
                        *a = *a + b;
                    }
                    offset += n;
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let scale = match (&self.nodes[i].op, axis) {
                    (Op::Mean(..), Axis::Rows) => F::one() / F::of(r as f64),
                    (Op::Mean(..), Axis::Cols) => F::one() / F::of(c as f64),
                    _ => F::one(),
                };
                let gx = slot(grads, *x, tx).data_mut();
                for rr in 0..r {
                    for cc in 0..c {
                        let gi = match axis {
                            Axis::Rows => cc,
                            Axis::Cols => rr,
                        };
                        gx[rr * c + cc] = gx[rr * c + cc] + scale * g.data()[gi];
                    }
                }
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gv = g.item();
                slot(grads, *x, tx).data_mut().iter_mut().for_each(|v| *v = *v + gv);
            }
            Op::Sigmoid(x) => {
                let y = out();
                let gx = slot(grads, *x, y).data_mut();
                for ((a, &yv), &gv) in gx.iter_mut().zip(y.data()).zip(g.data()) {
                    *a = *a + gv * yv * (F::one() - yv);
                }
            }
            Op::Tanh(x) => {
                let y = out();
                let gx = slot(grads, *x, y).data_mut();
                for ((a, &yv), &gv) in gx.iter_mut().zip(y.data()).zip(g.data()) {
                    *a = *a + gv * (F::one() - yv * yv);
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let gx = slot(grads, *x, tx).data_mut();
                for ((a, &xv), &gv) in gx.iter_mut().zip(tx.data()).zip(g.data()) {
                    if xv > F::zero() {
                        *a = *a + gv;
                    }
                }
            }
            Op::MaxConst(x, c) => {
                let tx = self.value(*x);
                let gx = slot(grads, *x, tx).data_mut();
                for ((a, &xv), &gv) in gx.iter_mut().zip(tx.data()).zip(g.data()) {
                    if xv > *c {
                        *a = *a + gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                let tx = self.value(*x);
                let gx = slot(grads, *x, tx).data_mut();
                for (a, &gv) in gx.iter_mut().zip(g.data()) {
                    *a = *a + gv * *c;
                }
            }
            Op::AddConst(x, _) | Op::Reshape(x) => {
                let tx = self.value(*x);
                let gx = slot(grads, *x, tx).data_mut();
                for (a, &gv) in gx.iter_mut().zip(g.data()) {
                    *a = *a + gv;
                }
            }
            Op::Softmax(x, axis) => {
                let y = out();
                let (r, c) = (y.rows(), y.cols());
                let gx = slot(grads, *x, y).data_mut();
                for_each_group(r, c, *axis, |idx| {
                    let dot: F = idx.clone().map(|j| g.data()[j] * y.data()[j]).sum();
                    for j in idx {
                        gx[j] = gx[j] + y.data()[j] * (g.data()[j] - dot);
                    }
                });
            }
            Op::L2Normalize(x) => {
                let (tx, y) = (self.value(*x), out());
                let c = y.cols();
                let gx = slot(grads, *x, tx).data_mut();
                for r in 0..y.rows() {
                    let xr = tx.row_slice(r);
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let n = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::NormalizeSum(x) => {
                let (tx, y) = (self.value(*x), out());
                let c = y.cols();
                let gx = slot(grads, *x, tx).data_mut();
                for r in 0..y.rows() {
                    let s: F = tx.row_slice(r).iter().copied().sum();
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + (gr[j] - dot) / s;
                    }
                }
            }
            Op::Distance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let denom = (sq_dist(ta.data(), tb.data()) + F::of(DISTANCE_EPS)).sqrt();
                let scale = g.item() / denom;
                let delta: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * scale).collect();
                let ga = slot(grads, *a, ta).data_mut();
                for (v, &d) in ga.iter_mut().zip(&delta) {
                    *v = *v + d;
                }
                let gb = slot(grads, *b, tb).data_mut();
                for (v, &d) in gb.iter_mut().zip(&delta) {
                    *v = *v - d;
                }
            }
            Op::PairwiseDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, s, e) = (ta.rows(), tb.rows(), ta.cols());
                let eps = F::of(DISTANCE_EPS);
                let mut ga_acc = vec![F::zero(); k * e];
                let mut gb_acc = vec![F::zero(); s * e];
                for ki in 0..k {
                    let ar = ta.row_slice(ki);
                    for si in 0..s {
                        let gv = g.data()[ki * s + si];
                        if gv == F::zero() {
                            continue;
                        }
                        let br = tb.row_slice(si);
                        let scale = gv / (sq_dist(ar, br) + eps).sqrt();
                        for j in 0..e {
                            let d = (ar[j] - br[j]) * scale;
                            ga_acc[ki * e + j] = ga_acc[ki * e + j] + d;
                            gb_acc[si * e + j] = gb_acc[si * e + j] - d;
                        }
                    }
                }
                add_into(slot(grads, *a, ta).data_mut(), &ga_acc);
                add_into(slot(grads, *b, tb).data_mut(), &gb_acc);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), g.cols());
                let gx = slot(grads, *x, tx).data_mut();
                for r in 0..g.rows() {
                    for j in 0..len {
                        let idx = r * c + start + j;
                        gx[idx] = gx[idx] + g.data()[r * len + j];
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let gx = slot(grads, *x, tx).data_mut();
                add_into(&mut gx[start * c..start * c + g.numel()], g.data());
            }
            Op::Gather(x, idx) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let gx = slot(grads, *x, tx).data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g.data()[r * c..(r + 1) * c]);
                }
            }
            Op::Transpose(x) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let gx = slot(grads, *x, tx).data_mut();
                for a in 0..r {
                    for b in 0..c {
                        gx[a * c + b] = gx[a * c + b] + g.data()[b * r + a];
                    }
                }
            }
        }
    }
}

fn slot<'g, F: Scalar>(grads: &'g mut [Option<Tensor<F>>], v: Var, like: &Tensor<F>) -> &'g mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn reduce<F: Scalar>(t: &Tensor<F>, axis: Axis, scale: F) -> Tensor<F> {
    let (r, c) = (t.rows(), t.cols());
    match axis {
        Axis::Rows => {
            let mut out = vec![F::zero(); c];
            for row in t.data().chunks(c) {
                add_into(&mut out, row);
            }
            out.iter_mut().for_each(|v| *v = *v * scale);
            Tensor::matrix(1, c, out)
        }
        Axis::Cols => {
            let out = t
                .data()
                .chunks(c)
                .map(|row| row.iter().copied().sum::<F>() * scale)
                .collect();
            Tensor::matrix(r, 1, out)
        }
    }
}

/// Calls `f` with the flat indices of each normalisation group.
fn for_each_group(
    r: usize,
    c: usize,
    axis: Axis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    match axis {
        Axis::Cols => {
            for row in 0..r {
                f((row * c..(row + 1) * c).step_by(1));
            }
        }
        Axis::Rows => {
            for col in 0..c {
                f((col..r * c).step_by(c));
            }
        }
    }
}
