//! Reverse-mode autodiff over 2-D matrices.
//!
//! Operations are recorded define-by-run: each call evaluates its node
//! immediately and appends it to the tape, so node order is topological by
//! construction. [`Tape::forward`] re-evaluates every node after leaves have
//! been replaced with [`Tape::set_leaf`], which is how finite-difference
//! checks perturb inputs without rebuilding the graph.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major inclusion mask for the masked softmax primitives. Excluded
/// entries produce 0 and receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::invalid("mask length does not match shape"));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, keep }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    /// 0/1 matrix view, for Hadamard masking.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask shape")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Adds a `1×n` row to every row of an `m×n` input.
    AddRow(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    ConcatRows(Var, Var),
    SoftmaxRows(Var, Option<Mask>),
    LogSoftmaxRows(Var, Option<Mask>),
    /// Pearson correlation between every row of the first input and every
    /// row of the second; norms floored at `eps`.
    Pearson(Var, Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Pearson(..) => "pearson",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`; panics for nodes that were not reached and are not leaves.
    pub fn wrt(&self, v: Var) -> &Matrix {
        self.get(v).expect("no adjoint recorded for node")
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

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn set_leaf(&mut self, v: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::NodeShape {
                node: v.0,
                op: "leaf",
                detail: format!("expected {:?}, got {:?}", node.value.shape(), value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let index = self.nodes.len();
        let value = self.eval(index, &op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var> {
        self.push(Op::ConcatRows(top, bottom))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<Mask>) -> Result<Var> {
        self.push(Op::SoftmaxRows(a, mask))
    }

    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Mask>) -> Result<Var> {
        self.push(Op::LogSoftmaxRows(a, mask))
    }

    pub fn pearson(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.push(Op::Pearson(a, b, eps))
    }

    /// Re-evaluates every non-leaf node in order and returns the last value.
    pub fn forward(&mut self) -> Result<&Matrix> {
        for index in 0..self.nodes.len() {
            if matches!(self.nodes[index].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[index].op.clone();
            self.nodes[index].value = self.eval(index, &op)?;
        }
        self.nodes
            .last()
            .map(|n| &n.value)
            .ok_or_else(|| Error::invalid("empty tape"))
    }

    fn shape_err(&self, node: usize, op: &Op, detail: String) -> Error {
        Error::NodeShape {
            node,
            op: op.name(),
            detail,
        }
    }

    fn eval(&self, index: usize, op: &Op) -> Result<Matrix> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wrap = |e: Error| match e {
            Error::Shape { left, right, .. } => {
                self.shape_err(index, op, format!("{left:?} vs {right:?}"))
            }
            other => other,
        };
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => val(a).matmul(val(b)).map_err(wrap)?,
            Op::Transpose(a) => val(a).transpose(),
            Op::Add(a, b) => val(a).add(val(b)).map_err(wrap)?,
            Op::AddRow(a, r) => {
                let (a, r) = (val(a), val(r));
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(self.shape_err(
                        index,
                        op,
                        format!("{:?} + row {:?}", a.shape(), r.shape()),
                    ));
                }
                let mut out = a.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Mul(a, b) => val(a).hadamard(val(b)).map_err(wrap)?,
            Op::Scale(a, s) => val(a).scale(*s),
            Op::Relu(a) => val(a).map(|x| x.max(0.0)),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Sum(a) => Matrix::scalar(val(a).sum()),
            Op::ConcatRows(a, b) => val(a).vstack(val(b)).map_err(wrap)?,
            Op::SoftmaxRows(a, mask) => {
                self.check_mask(index, op, val(a), mask.as_ref())?;
                softmax_rows(val(a), mask.as_ref())
            }
            Op::LogSoftmaxRows(a, mask) => {
                self.check_mask(index, op, val(a), mask.as_ref())?;
                log_softmax_rows(val(a), mask.as_ref())
            }
            Op::Pearson(a, b, eps) => {
                let (a, b) = (val(a), val(b));
                if a.cols() != b.cols() {
                    return Err(self.shape_err(
                        index,
                        op,
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let (na, _) = normalize_rows(a, *eps);
                let (nb, _) = normalize_rows(b, *eps);
                na.matmul_nt(&nb).map_err(wrap)?
            }
        })
    }

    fn check_mask(&self, index: usize, op: &Op, a: &Matrix, mask: Option<&Mask>) -> Result<()> {
        match mask {
            Some(m) if m.shape() != a.shape() => Err(self.shape_err(
                index,
                op,
                format!("mask {:?} vs input {:?}", m.shape(), a.shape()),
            )),
            _ => Ok(()),
        }
    }

    /// Adjoints of `output` (which must be `1×1`) with respect to every node
    /// up to and including it. Every leaf gets an adjoint, zero when the
    /// output does not depend on it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::scalar(1.0));

        for index in (0..=output.0).rev() {
            let Some(g) = adj[index].take() else { continue };
            let node = &self.nodes[index];
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[index] = Some(g);
        }
        for (index, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && adj[index].is_none() {
                adj[index] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, y: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(adj, *a, g.matmul_nt(val(b))?)?;
                accumulate(adj, *b, val(a).matmul_tn(g)?)?;
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose())?,
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, g.clone())?;
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g.clone())?;
                let mut col_sums = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, x) in col_sums.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                accumulate(adj, *r, Matrix::row_vector(&col_sums))?;
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.hadamard(val(b))?)?;
                accumulate(adj, *b, g.hadamard(val(a))?)?;
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let mask = val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(adj, *a, g.hadamard(&mask)?)?;
            }
            Op::Exp(a) => accumulate(adj, *a, g.hadamard(y)?)?,
            Op::Log(a) => {
                let recip = val(a).map(|x| 1.0 / x);
                accumulate(adj, *a, g.hadamard(&recip)?)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::ConcatRows(a, b) => {
                let ra = val(a).rows();
                let cols = g.cols();
                let top = Matrix::from_vec(ra, cols, g.data()[..ra * cols].to_vec())?;
                let bottom =
                    Matrix::from_vec(g.rows() - ra, cols, g.data()[ra * cols..].to_vec())?;
                accumulate(adj, *a, top)?;
                accumulate(adj, *b, bottom)?;
            }
            Op::SoftmaxRows(a, mask) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m.keeps(i, j));
                    let inner: f64 = (0..y.cols())
                        .filter(|&j| keep(j))
                        .map(|j| y.get(i, j) * g.get(i, j))
                        .sum();
                    for j in (0..y.cols()).filter(|&j| keep(j)) {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - inner));
                    }
                }
                accumulate(adj, *a, d)?;
            }
            Op::LogSoftmaxRows(a, mask) => {
                let probs = softmax_rows(val(a), mask.as_ref());
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m.keeps(i, j));
                    let total: f64 = (0..y.cols()).filter(|&j| keep(j)).map(|j| g.get(i, j)).sum();
                    for j in (0..y.cols()).filter(|&j| keep(j)) {
                        d.set(i, j, g.get(i, j) - probs.get(i, j) * total);
                    }
                }
                accumulate(adj, *a, d)?;
            }
            Op::Pearson(a, b, eps) => {
                let (na, ra) = normalize_rows(val(a), *eps);
                let (nb, rb) = normalize_rows(val(b), *eps);
                // S = Â·B̂ᵀ
                let d_na = g.matmul(&nb)?;
                let d_nb = g.matmul_tn(&na)?;
                accumulate(adj, *a, normalize_rows_backward(&na, &ra, &d_na, *eps))?;
                accumulate(adj, *b, normalize_rows_backward(&nb, &rb, &d_nb, *eps))?;
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => *existing = existing.add(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

pub(crate) fn softmax_rows(a: &Matrix, mask: Option<&Mask>) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let keep = |j: usize| mask.is_none_or(|m| m.keeps(i, j));
        let max = (0..a.cols())
            .filter(|&j| keep(j))
            .map(|j| a.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in (0..a.cols()).filter(|&j| keep(j)) {
            let e = (a.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for j in (0..a.cols()).filter(|&j| keep(j)) {
            let v = out.get(i, j) / total;
            out.set(i, j, v);
        }
    }
    out
}

pub(crate) fn log_softmax_rows(a: &Matrix, mask: Option<&Mask>) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let keep = |j: usize| mask.is_none_or(|m| m.keeps(i, j));
        let max = (0..a.cols())
            .filter(|&j| keep(j))
            .map(|j| a.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let log_total = (0..a.cols())
            .filter(|&j| keep(j))
            .map(|j| (a.get(i, j) - max).exp())
            .sum::<f64>()
            .ln();
        for j in (0..a.cols()).filter(|&j| keep(j)) {
            out.set(i, j, (a.get(i, j) - max) - log_total);
        }
    }
    out
}

/// Centers each row and scales it to unit norm, flooring the norm at `eps`.
/// Returns the normalized rows and the unfloored norms.
pub(crate) fn normalize_rows(a: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let d = a.cols() as f64;
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|x| *x -= mean);
        let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = r.max(eps);
        row.iter_mut().for_each(|x| *x /= denom);
        norms.push(r);
    }
    (out, norms)
}

fn normalize_rows_backward(normed: &Matrix, norms: &[f64], grad: &Matrix, eps: f64) -> Matrix {
    let d = normed.cols() as f64;
    let mut out = Matrix::zeros(normed.rows(), normed.cols());
    for (i, &r) in norms.iter().enumerate() {
        let u = normed.row(i);
        let g = grad.row(i);
        let row = out.row_mut(i);
        if r > eps {
            let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &ui), &gi) in row.iter_mut().zip(u).zip(g) {
                *o = (gi - ui * proj) / r;
            }
        } else {
            for (o, &gi) in row.iter_mut().zip(g) {
                *o = gi / eps;
            }
        }
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    out
}
