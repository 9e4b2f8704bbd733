//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Leaves are either trainable parameters (gradient requested) or constants.
//! [`Graph::backward`] walks the tape once in reverse and returns the gradient
//! of a scalar node with respect to every node that depends on a parameter.
//!
//! Shapes follow a matrix convention: `N×d` batches, rank-1 feature vectors
//! that broadcast across rows, and rank-0 scalars.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Powf(Var, f64),
    LogSoftmax(Var),
    ColMean(Var),
    SumAll(Var),
    RowSum(Var),
    PickCols(Var, Vec<usize>),
    RowNorm(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Powf(..) => "powf",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ColMean(_) => "col_mean",
            Op::SumAll(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::PickCols(..) => "pick_cols",
            Op::RowNorm(_) => "row_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on (constants, detached values) get an all-zero tensor.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn is_some(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<(&'static str, usize)>,
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

    /// Leaf whose gradient is requested.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fails with the first operation that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((op, node)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((op.name(), id));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape_of(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let (_, c) = self.expect_matrix(op, x)?;
        let rs = self.shape_of(r);
        if rs.len() != 1 || rs[0] != c {
            return Err(Error::shape(
                op,
                format!("row operand {rs:?} does not broadcast over width {c}"),
            ));
        }
        Ok(())
    }

    fn same_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.expect_matrix("matmul", a)?;
        let (k2, m) = self.expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}x{k}] x [{k2}x{m}]")));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `x + r` with the rank-1 `r` broadcast across rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_operand("add_row", x, r)?;
        let t = broadcast_rows(self.value(x), self.value(r), |a, b| a + b);
        let ng = self.needs_grad(x) || self.needs_grad(r);
        Ok(self.push(t, Op::AddRow(x, r), ng))
    }

    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_operand("sub_row", x, r)?;
        let t = broadcast_rows(self.value(x), self.value(r), |a, b| a - b);
        let ng = self.needs_grad(x) || self.needs_grad(r);
        Ok(self.push(t, Op::SubRow(x, r), ng))
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_operand("mul_row", x, r)?;
        let t = broadcast_rows(self.value(x), self.value(r), |a, b| a * b);
        let ng = self.needs_grad(x) || self.needs_grad(r);
        Ok(self.push(t, Op::MulRow(x, r), ng))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shapes(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.expect_matrix("log_softmax", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::LogSoftmax(x), ng))
    }

    /// Per-column mean of an `N×d` matrix, giving a rank-1 `d` vector.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.expect_matrix("col_mean", x)?;
        if n == 0 {
            return Err(Error::shape("col_mean", "empty batch"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::vector(out), Op::ColMean(x), ng))
    }

    /// Sum of every element, giving a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Mean of every element, giving a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum of an `N×d` matrix, giving a rank-1 `N` vector.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.expect_matrix("row_sum", x)?;
        let out = self.value(x).data().chunks(c).map(|r| r.iter().sum()).collect();
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::vector(out), Op::RowSum(x), ng))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = self.expect_matrix("pick_cols", x)?;
        if cols.len() != n {
            return Err(Error::shape("pick_cols", format!("{} indices for {n} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "column index {bad} out of range for width {c}"
            )));
        }
        let src = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::vector(out), Op::PickCols(x, cols.to_vec()), ng))
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.expect_matrix("row_norm", x)?;
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::vector(out), Op::RowNorm(x), ng))
    }

    /// Row lookup into a `V×d` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, _) = self.expect_matrix("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for table of {v} rows"
            )));
        }
        let t = self.value(table).select_rows(idx);
        let ng = self.needs_grad(table);
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.expect_matrix("concat_cols", a)?;
        let (n2, q) = self.expect_matrix("concat_cols", b)?;
        if n != n2 {
            return Err(Error::shape("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&va[i * p..(i + 1) * p]);
            out.extend_from_slice(&vb[i * q..(i + 1) * q]);
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::matrix(n, p + q, out)?, Op::ConcatCols(a, b), ng))
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss`.
    ///
    /// Fails if any recorded node is non-finite, naming the first offending
    /// operation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape_of(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape_of(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: self.nodes[id].op.name(),
                        node: id,
                    });
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let x = &self.nodes[v.0].value;
        let data = x.data().iter().enumerate().map(|(i, &xv)| f(i, xv)).collect();
        let delta = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.accumulate(grads, v, delta);
    }

    fn propagate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[id].value;
        let d = dy.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                if self.needs_grad(*a) {
                    let da = matmul_nt(d, self.value(*b).data(), n, m, k);
                    self.accumulate(grads, *a, Tensor::matrix(n, k, da).unwrap());
                }
                if self.needs_grad(*b) {
                    let db = matmul_tn(self.value(*a).data(), d, n, k, m);
                    self.accumulate(grads, *b, Tensor::matrix(k, m, db).unwrap());
                }
            }
            Op::AddRow(x, r) | Op::SubRow(x, r) => {
                let sign = if matches!(self.nodes[id].op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *x, dy.clone());
                if self.needs_grad(*r) {
                    let mut cs = col_sums(dy);
                    cs.iter_mut().for_each(|v| *v *= sign);
                    self.accumulate(grads, *r, Tensor::vector(cs));
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let c = rv.len();
                let rd = rv.data();
                self.accumulate_with(grads, *x, |i, _| d[i] * rd[i % c]);
                if self.needs_grad(*r) {
                    let mut cs = vec![0.0; c];
                    for (i, (&g, &xi)) in d.iter().zip(xv.data()).enumerate() {
                        cs[i % c] += g * xi;
                    }
                    self.accumulate(grads, *r, Tensor::vector(cs));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate_with(grads, *b, |i, _| -d[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |i, _| d[i] * bv[i]);
                self.accumulate_with(grads, *b, |i, _| d[i] * av[i]);
            }
            Op::Scale(x, k) => self.accumulate_with(grads, *x, |i, _| d[i] * k),
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.clone()),
            Op::Relu(x) => {
                self.accumulate_with(grads, *x, |i, xv| if xv > 0.0 { d[i] } else { 0.0 })
            }
            Op::LeakyRelu(x, s) => {
                self.accumulate_with(grads, *x, |i, xv| if xv > 0.0 { d[i] } else { s * d[i] })
            }
            Op::Sigmoid(x) => {
                let yv = y.data();
                self.accumulate_with(grads, *x, |i, _| d[i] * yv[i] * (1.0 - yv[i]))
            }
            Op::Exp(x) => {
                let yv = y.data();
                self.accumulate_with(grads, *x, |i, _| d[i] * yv[i])
            }
            Op::Abs(x) => self.accumulate_with(grads, *x, |i, xv| {
                if xv > 0.0 {
                    d[i]
                } else if xv < 0.0 {
                    -d[i]
                } else {
                    0.0
                }
            }),
            Op::Square(x) => self.accumulate_with(grads, *x, |i, xv| 2.0 * xv * d[i]),
            Op::Powf(x, p) => {
                self.accumulate_with(grads, *x, |i, xv| d[i] * p * xv.powf(p - 1.0))
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let yv = y.data();
                let mut dx = vec![0.0; yv.len()];
                for ((yr, dr), out) in yv.chunks(c).zip(d.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        out[j] = dr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::ColMean(x) => {
                let n = self.value(*x).rows() as f64;
                let c = y.len();
                self.accumulate_with(grads, *x, |i, _| d[i % c] / n)
            }
            Op::SumAll(x) => {
                let g = d[0];
                self.accumulate_with(grads, *x, |_, _| g)
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols();
                self.accumulate_with(grads, *x, |i, _| d[i / c])
            }
            Op::PickCols(x, cols) => {
                if self.needs_grad(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (i, &j) in cols.iter().enumerate() {
                        dx.data_mut()[i * c + j] = d[i];
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::RowNorm(x) => {
                let c = self.value(*x).cols();
                let norms = y.data();
                self.accumulate_with(grads, *x, |i, xv| {
                    let nrm = norms[i / c];
                    if nrm > 0.0 {
                        d[i / c] * xv / nrm
                    } else {
                        0.0
                    }
                })
            }
            Op::GatherRows(t, idx) => {
                if self.needs_grad(*t) {
                    let tv = self.value(*t);
                    let c = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    let buf = dt.data_mut();
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] += d[i * c + j];
                        }
                    }
                    self.accumulate(grads, *t, dt);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let w = p + q;
                self.accumulate_with(grads, *a, |i, _| d[(i / p) * w + i % p]);
                self.accumulate_with(grads, *b, |i, _| d[(i / q) * w + p + i % q]);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_rows(x: &Tensor, r: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = r.len();
    let rd = r.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, rd[i % c]))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `[n×k] · [k×m]`. Each output row depends only on the matching input row,
/// so results do not change with batch partitioning.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (arow, orow) in a.chunks(k.max(1)).zip(out.chunks_mut(m.max(1))) {
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[n×m] · [k×m]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for (arow, orow) in a.chunks(m.max(1)).zip(out.chunks_mut(k.max(1))) {
        for (o, brow) in orow.iter_mut().zip(b.chunks(m.max(1))) {
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[n×k]ᵀ · [n×m]`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0; 4]);
    }

    #[test]
    fn gradient_of_half_squared_norm_is_identity() {
        let mut g = Graph::new();
        let w0 = t(&[&[1.0, -2.0], &[3.0, 0.5]]);
        let w = g.param(w0.clone());
        let sq = g.square(w);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w), w0);
    }

    #[test]
    fn constants_receive_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(w, c).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[3.0, 4.0]);
        assert_eq!(grads.get(c).data(), &[0.0, 0.0]);
        assert!(!grads.is_some(c));
    }

    #[test]
    fn detach_cuts_the_path() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(w);
        let d = g.detach(sq);
        let p = g.mul(d, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        // d/dw (const * w) = const = w^2
        assert_eq!(grads.get(w).data(), &[1.0, 4.0]);
    }

    #[test]
    fn non_finite_names_the_operation() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.0, 1.0]));
        let p = g.powf(w, -1.0);
        let loss = g.sum(p);
        match g.backward(loss) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "powf"),
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 3f64.ln()], &[1000.0, -1000.0]]));
        let y = g.log_softmax(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert!((v[0] - 0.25f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.75f64.ln()).abs() < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
