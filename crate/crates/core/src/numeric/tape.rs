//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] replays the
//! recorded nodes in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes created before it.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied inside [`Tape::bernoulli_log_likelihood`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumSquares(Var),
    RowSum(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GaussianSample { mu: Var, sigma: Var, noise: Tensor },
    KlDiagNormal(Var, Var),
    BernoulliLogLik { logits: Var, targets: Tensor },
    MaskMul(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf (zeros if the loss does not depend on it).
    /// `None` for constants and for intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

/// `ln σ(x)` computed as `-softplus(-x)`.
fn log_sigmoid(x: f64) -> f64 {
    let t = -x;
    -(t.max(0.0) + (-t.abs()).exp().ln_1p())
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // Constant subgraphs are folded into leaves so backward never visits them.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        let c = av.cols();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        debug_assert_eq!(value.cols(), c);
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() || x.cols() == 0 {
            return Err(Error::invalid("softmax", "empty vector"));
        }
        let mut value = x.clone();
        for r in 0..x.rows() {
            softmax_row(x.row(r), value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() || x.cols() == 0 {
            return Err(Error::invalid("log_softmax", "empty vector"));
        }
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumSquares(a), rg)
    }

    /// Sums each row of a matrix into a vector of length `rows`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::vector((0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Selects rows `idx` of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.as_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {i} out of range for {n} rows"),
                ));
            }
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Adds row `k` of `a` into output row `idx[k]` of an `n`-row matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, c) = x.as_matrix("scatter_add_rows")?;
        if m != idx.len() {
            return Err(Error::Dimension {
                op: "scatter_add_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut value = Tensor::zeros(&[n, c]);
        for (k, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::invalid(
                    "scatter_add_rows",
                    format!("target row {i} out of range for {n} rows"),
                ));
            }
            for (o, v) in value.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterAddRows(a, idx.to_vec()), rg))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).as_matrix("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).as_matrix("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.as_matrix("concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reparameterised Gaussian draw `mu + sigma ⊙ noise`.
    pub fn gaussian_sample(&mut self, mu: Var, sigma: Var, noise: Tensor) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(sigma));
        check_same("gaussian_sample", m, s)?;
        if m.shape() != noise.shape() {
            return Err(Error::Dimension {
                op: "gaussian_sample",
                lhs: m.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        if s.data().iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::invalid("gaussian_sample", "sigma must be strictly positive"));
        }
        let mut value = m.clone();
        for ((o, &sd), &e) in value.data_mut().iter_mut().zip(s.data()).zip(noise.data()) {
            *o += sd * e;
        }
        let rg = self.rg(&[mu, sigma]);
        Ok(self.push(value, Op::GaussianSample { mu, sigma, noise }, rg))
    }

    /// `KL(N(mu, diag(sigma_sq)) ‖ N(0, I))` summed over every entry.
    pub fn kl_diag_normal(&mut self, mu: Var, sigma_sq: Var) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(sigma_sq));
        check_same("kl_diag_normal", m, s)?;
        if s.data().iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::invalid("kl_diag_normal", "variance must be strictly positive"));
        }
        let kl = 0.5
            * m.data()
                .iter()
                .zip(s.data())
                .map(|(&mu, &v)| mu * mu + v - 1.0 - v.ln())
                .sum::<f64>();
        let rg = self.rg(&[mu, sigma_sq]);
        Ok(self.push(Tensor::scalar(kl), Op::KlDiagNormal(mu, sigma_sq), rg))
    }

    /// `Σ y·ln σ(e) + (1-y)·ln(1-σ(e))` with each probability floored at
    /// [`PROB_FLOOR`].
    pub fn bernoulli_log_likelihood(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let e = self.value(logits);
        check_same("bernoulli_log_likelihood", e, &targets)?;
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(
                "bernoulli_log_likelihood",
                "targets must be 0 or 1",
            ));
        }
        let total = bernoulli_log_likelihood_value(e.data(), targets.data());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BernoulliLogLik { logits, targets },
            rg,
        ))
    }

    /// Multiplies by a fixed mask tensor.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        check_same("mask_mul", self.value(a), &mask)?;
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskMul(a, mask), rg))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mask = dropout_mask(self.value(a).shape(), p, training, rng)?;
        match mask {
            None => Ok(a),
            Some(mask) => self.mask_mul(a, mask),
        }
    }

    /// Computes adjoints of every trainable leaf with respect to a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let is_param = node.requires_grad && matches!(node.op, Op::Leaf);
            if is_param && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(av)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, acc)?);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, yi| gi * yi)),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, yi| gi * yi * (1.0 - yi)))
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gi, xi| gi * sigmoid(-xi)));
            }
            Op::Softmax(a) => {
                let mut dx = out.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let mut dx = out.clone();
                for r in 0..out.rows() {
                    let gr = g.row(r);
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &lp), &gi) in dx.row_mut(r).iter_mut().zip(out.row(r)).zip(gr) {
                        *d = gi - lp.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let s = g.item()?;
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::SumSquares(a) => {
                let s = g.item()?;
                self.accumulate(grads, *a, self.value(*a).map(|x| 2.0 * x * s));
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|d| *d = gr);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::matrix(idx.len(), c, data)?);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, c, data)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.len();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(v.shape().to_vec(), slice)?);
                    }
                    offset += n;
                }
            }
            Op::GaussianSample { mu, sigma, noise } => {
                self.accumulate(grads, *mu, g.clone());
                self.accumulate(grads, *sigma, g.zip_map(noise, |gi, e| gi * e));
            }
            Op::KlDiagNormal(mu, var) => {
                let s = g.item()?;
                self.accumulate(grads, *mu, self.value(*mu).map(|m| m * s));
                self.accumulate(grads, *var, self.value(*var).map(|v| 0.5 * (1.0 - 1.0 / v) * s));
            }
            Op::BernoulliLogLik { logits, targets } => {
                let s = g.item()?;
                let floor = PROB_FLOOR.ln();
                let d = self.value(*logits).zip_map(targets, |e, y| {
                    let pos = if log_sigmoid(e) > floor { 1.0 - sigmoid(e) } else { 0.0 };
                    let neg = if log_sigmoid(-e) > floor { sigmoid(e) } else { 0.0 };
                    s * (y * pos - (1.0 - y) * neg)
                });
                self.accumulate(grads, *logits, d);
            }
            Op::MaskMul(a, mask) => self.accumulate(grads, *a, g.zip_map(mask, |gi, m| gi * m)),
        }
        Ok(())
    }
}

/// Value of the floored Bernoulli log-likelihood, shared with the decoder.
pub(crate) fn bernoulli_log_likelihood_value(logits: &[f64], targets: &[f64]) -> f64 {
    let floor = PROB_FLOOR.ln();
    logits
        .iter()
        .zip(targets)
        .map(|(&e, &y)| y * log_sigmoid(e).max(floor) + (1.0 - y) * log_sigmoid(-e).max(floor))
        .sum()
}

pub(crate) fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Draws an inverted-dropout mask; `None` means identity.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("ratio {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(Some(Tensor::new(shape.to_vec(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn relu_values_and_grads() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-3.0, -0.5]));
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric_and_oracle() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax(x).unwrap();
        // exp(k) / (e + e² + e³), evaluated independently
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in t.value(y).data().iter().enumerate() {
            let expected = ((k + 1) as f64).exp() / z;
            assert!((v - expected).abs() < 1e-15);
        }

        let e = t.constant(Tensor::vector(vec![]));
        assert!(t.softmax(e).is_err());
    }

    #[test]
    fn gaussian_sample_contract() {
        let mut t = Tape::new();
        let mu = t.param(Tensor::vector(vec![0.3, -1.0]));
        let sigma = t.param(Tensor::vector(vec![2.0, 0.5]));
        let z = t.gaussian_sample(mu, sigma, Tensor::zeros(&[2])).unwrap();
        assert_eq!(t.value(z).data(), &[0.3, -1.0]);

        let z = t.gaussian_sample(mu, sigma, Tensor::vector(vec![1.0, -2.0])).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(sigma).unwrap().data(), &[1.0, -2.0]);

        let mu0 = t.constant(Tensor::zeros(&[3]));
        let one = t.constant(Tensor::ones(&[3]));
        let eps = Tensor::vector(vec![0.1, -0.7, 1.3]);
        let z = t.gaussian_sample(mu0, one, eps.clone()).unwrap();
        assert_eq!(t.value(z), &eps);

        let bad = t.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        assert!(t.gaussian_sample(mu0, bad, eps).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut t = Tape::new();
        let mu = t.constant(Tensor::zeros(&[4]));
        let var = t.constant(Tensor::ones(&[4]));
        let kl = t.kl_diag_normal(mu, var).unwrap();
        assert_eq!(t.value(kl).item().unwrap(), 0.0);

        let mu = t.constant(Tensor::vector(vec![1.0]));
        let var = t.constant(Tensor::vector(vec![1.0]));
        let kl = t.kl_diag_normal(mu, var).unwrap();
        assert_eq!(t.value(kl).item().unwrap(), 0.5);

        let bad = t.constant(Tensor::vector(vec![-1.0]));
        assert!(t.kl_diag_normal(mu, bad).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.param(Tensor::scalar(3.0));
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 3.0);
        assert_eq!(g.get(y).unwrap().item().unwrap(), 2.0);

        let unused = t.param(Tensor::vector(vec![1.0, 2.0]));
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);

        let v = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn dropout_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.param(Tensor::ones(&[2, 3]));
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn bernoulli_log_likelihood_basic() {
        let mut t = Tape::new();
        let e = t.constant(Tensor::vector(vec![0.0]));
        let ll = t.bernoulli_log_likelihood(e, Tensor::vector(vec![1.0])).unwrap();
        assert!((t.value(ll).item().unwrap() - 0.5f64.ln()).abs() < 1e-15);

        let e = t.constant(Tensor::vector(vec![-800.0]));
        let ll = t.bernoulli_log_likelihood(e, Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(t.value(ll).item().unwrap(), 0.0);

        let ll = t.bernoulli_log_likelihood(e, Tensor::vector(vec![0.5]));
        assert!(ll.is_err());
    }
}
