//! Reverse-mode gradient tape over matrices.
//!
//! Every value on the tape is a rank-2 [`DenseArray`]. Operations append a
//! node holding the forward value and enough context to run its vector-Jacobian
//! product; [`Tape::backward`] walks the nodes in reverse.

use std::collections::BTreeMap;

use super::array::{matmul_into, matmul_t_into, matmul_tn_into, DenseArray};
use super::params::ParameterSet;
use crate::error::{Error, Result};

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
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Silu(Var),
    Softmax(Var, f64),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Nll(Var, Vec<usize>, DenseArray),
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let a = &self.nodes[v.0].value;
        (a.rows(), a.cols())
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
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

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient, retrievable by its [`Var`].
    pub fn input(&mut self, value: DenseArray) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf. Repeated lookups of the same name share one node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.get(name)?.as_matrix();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Cut the gradient path: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(DenseArray::matrix(r, c, data).expect("shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(format!(
                "row broadcast: {r}x{c} with {:?}",
                self.shape(row)
            )));
        }
        let rv = self.value(row).data().to_vec();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(xv.row(i).iter().zip(&rv).map(|(&a, &b)| f(a, b)));
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(DenseArray::matrix(r, c, data)?, op, rg))
    }

    /// `x + row` with `row` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x ⊙ row` with `row` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    /// Add a constant array; the gradient passes through to `x` unchanged.
    pub fn add_const(&mut self, x: Var, c: &DenseArray) -> Result<Var> {
        let cv = self.constant(c.clone());
        self.same_shape(x, cv, "add_const")?;
        Ok(self.zip(x, cv, |a, b| a + b, Op::Add(x, cv)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    /// `x · s` for a `1×1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("scale_by expects a 1x1 scale"));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Row-wise `softmax(x / temp)`.
    pub fn softmax_rows(&mut self, x: Var, temp: f64) -> Result<Var> {
        if !(temp > 0.0) {
            return Err(Error::config(format!("softmax temperature must be > 0, got {temp}")));
        }
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax(xv.row(i), temp));
        }
        let rg = self.rg(x);
        Ok(self.push(DenseArray::matrix(r, c, data)?, Op::Softmax(x, temp), rg))
    }

    /// Parameter-free layer normalisation of each row.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * s));
            inv.push(s);
        }
        let rg = self.rg(x);
        self.push(DenseArray::matrix(r, c, data).expect("shape"), Op::LayerNorm(x, inv), rg)
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            data.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(DenseArray::matrix(r, c, data).expect("shape"), Op::L2Normalize(x, norms), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Stack the rows of every input, in order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat_rows of nothing"))?;
        let c = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::dim(format!("concat_rows: width {pc} vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
            rg |= self.rg(p);
        }
        Ok(self.push(DenseArray::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::dim(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(DenseArray::matrix(len, c, data)?, Op::SliceRows(x, start), rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::input(format!("row id {id} out of range for {r} rows")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            DenseArray::matrix(ids.len(), c, data)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(DenseArray::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(DenseArray::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `−log softmax(x_i)[targets_i]`.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} rows", targets.len())));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Usage(format!("target {t} out of range 0..{c}")));
            }
            let row = xv.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = DenseArray::matrix(r, c, probs)?;
        let rg = self.rg(x);
        Ok(self.push(
            DenseArray::scalar(total / r as f64),
            Op::Nll(x, targets.to_vec(), probs),
            rg,
        ))
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_seeded(&[(output, DenseArray::scalar(1.0))])
    }

    /// Backpropagate from arbitrary seeds `∂L/∂v` on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, DenseArray)]) -> Result<Gradients> {
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            let g = g.as_matrix();
            if (g.rows(), g.cols()) != self.shape(*v) {
                return Err(Error::dim("seed gradient shape mismatch"));
            }
            accumulate(&mut grads[v.0], &g);
            start = start.max(v.0);
        }
        for i in (0..=start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| DenseArray::zeros(&[self.shape(*v).0, self.shape(*v).1]));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_t_into(g.data(), bv.data(), &mut d, m, n, k);
                    add_into(&mut grads[a.0], m, k, d);
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; k * n];
                    matmul_tn_into(av.data(), g.data(), &mut d, m, k, n);
                    add_into(&mut grads[b.0], k, n, d);
                }
            }
            Op::MatMulT(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut d, m, n, k);
                    add_into(&mut grads[a.0], m, k, d);
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; n * k];
                    matmul_tn_into(g.data(), av.data(), &mut d, m, n, k);
                    add_into(&mut grads[b.0], n, k, d);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], &g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = zip_data(g, self.value(*b), |x, y| x * y);
                    add_into(&mut grads[a.0], g.rows(), g.cols(), d);
                }
                if self.rg(*b) {
                    let d = zip_data(g, self.value(*a), |x, y| x * y);
                    add_into(&mut grads[b.0], g.rows(), g.cols(), d);
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.rg(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (dj, gj) in d.iter_mut().zip(g.row(r)) {
                            *dj += gj;
                        }
                    }
                    add_into(&mut grads[row.0], 1, c, d);
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let c = g.cols();
                if self.rg(*x) {
                    let mut d = Vec::with_capacity(g.len());
                    for r in 0..g.rows() {
                        d.extend(g.row(r).iter().zip(rv.data()).map(|(a, b)| a * b));
                    }
                    add_into(&mut grads[x.0], g.rows(), c, d);
                }
                if self.rg(*row) {
                    let mut d = vec![0.0; c];
                    for r in 0..g.rows() {
                        for ((dj, gj), xj) in d.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *dj += gj * xj;
                        }
                    }
                    add_into(&mut grads[row.0], 1, c, d);
                }
            }
            Op::Scale(x, k) => {
                accumulate(&mut grads[x.0], &g.map(|v| v * k));
            }
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).item();
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], &g.map(|v| v * k));
                }
                if self.rg(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    add_into(&mut grads[s.0], 1, 1, vec![d]);
                }
            }
            Op::Exp(x) => {
                let d = zip_data(g, out, |a, b| a * b);
                add_into(&mut grads[x.0], g.rows(), g.cols(), d);
            }
            Op::Silu(x) => {
                let d = zip_data(g, self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                add_into(&mut grads[x.0], g.rows(), g.cols(), d);
            }
            Op::Softmax(x, temp) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - s) / temp));
                }
                add_into(&mut grads[x.0], r, c, d);
            }
            Op::LayerNorm(x, inv) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    d.extend(y.iter().zip(gy).map(|(yv, gv)| inv[i] * (gv - mg - yv * mgy)));
                }
                add_into(&mut grads[x.0], r, c, d);
            }
            Op::L2Normalize(x, norms) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(yv, gv)| (gv - yv * s) / norms[i]));
                }
                add_into(&mut grads[x.0], r, c, d);
            }
            Op::Transpose(x) => {
                accumulate(&mut grads[x.0], &g.transpose());
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut at = 0;
                for p in parts {
                    let pr = self.shape(*p).0;
                    if self.rg(*p) {
                        let d = g.data()[at * c..(at + pr) * c].to_vec();
                        add_into(&mut grads[p.0], pr, c, d);
                    }
                    at += pr;
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.shape(*x);
                let slot = grads[x.0].get_or_insert_with(|| DenseArray::zeros(&[r, c]));
                let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                for (a, b) in dst.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = self.shape(*table);
                let slot = grads[table.0].get_or_insert_with(|| DenseArray::zeros(&[r, c]));
                for (k, &id) in ids.iter().enumerate() {
                    let src = g.row(k);
                    for (a, b) in slot.row_mut(id).iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                add_into(&mut grads[x.0], r, c, g.data().to_vec());
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                add_into(&mut grads[x.0], r, c, vec![g.item(); r * c]);
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let k = g.item() / (r * c) as f64;
                add_into(&mut grads[x.0], r, c, vec![k; r * c]);
            }
            Op::Nll(x, targets, probs) => {
                let (r, c) = (probs.rows(), probs.cols());
                let k = g.item() / r as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= k;
                }
                add_into(&mut grads[x.0], r, c, d);
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<DenseArray>>,
    params: BTreeMap<String, DenseArray>,
}

impl Gradients {
    /// Gradient of any node; zero-shaped `None` when nothing flowed into it.
    pub fn of(&self, v: Var) -> Option<&DenseArray> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter used on the tape.
    pub fn param(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name)
    }

    /// Gradients for every parameter in `params`, with exact zeros for
    /// parameters the computation never touched.
    pub fn for_params(&self, params: &ParameterSet) -> BTreeMap<String, DenseArray> {
        params
            .iter()
            .map(|(name, p)| {
                let g = self.params.get(name).map_or_else(
                    || DenseArray::zeros(p.value.shape()),
                    |g| g.clone().reshape(p.value.shape().to_vec()).expect("param shape"),
                );
                (name.to_string(), g)
            })
            .collect()
    }

    pub fn into_param_map(self) -> BTreeMap<String, DenseArray> {
        self.params
    }
}

fn accumulate(slot: &mut Option<DenseArray>, g: &DenseArray) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn add_into(slot: &mut Option<DenseArray>, r: usize, c: usize, d: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        None => *slot = Some(DenseArray::matrix(r, c, d).expect("gradient shape")),
    }
}

fn zip_data(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax(x / temp)`, max-shifted.
pub fn softmax(x: &[f64], temp: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
