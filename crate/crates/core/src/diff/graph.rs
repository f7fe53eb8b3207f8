//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Leaves that
//! require gradients keep an accumulated gradient across `backward` calls;
//! intermediate adjoints are discarded after each sweep.
//!
//! Discrete choices made during the forward pass (top-k / bottom-M selection,
//! argmin in a min-over-set) are recorded in [`Graph::decisions`] so that a
//! finite-difference probe can detect when a perturbation crossed a
//! selection boundary.

use std::collections::HashMap;

use crate::diff::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Lower clamp applied inside `log`.
pub const LOG_CLAMP: f64 = 1e-8;
/// Norms below this are treated as this value in `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

fn sq_norms<T: Scalar>(m: &Matrix<T>) -> Vec<f64> {
    (0..m.rows())
        .map(|i| dot(m.row(i), m.row(i)).max(NORM_EPS * NORM_EPS))
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowSoftmax(Var, T),
    LayerNorm(Var, T),
    L2Normalize(Var),
    Cosine(Var, Var),
    RowNorms(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    MinRows(Var, Vec<usize>),
    Element(Var, usize, usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Matrix<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    decisions: Vec<usize>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            decisions: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any was propagated.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Discrete selections recorded so far, in forward order.
    pub fn decisions(&self) -> &[usize] {
        &self.decisions
    }

    /// Leaf parameters and their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn leaf(&mut self, value: Matrix<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Input leaf that accumulates gradients.
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter; one leaf per parameter per graph.
    /// Frozen parameters never receive gradients.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable, Some(id));
        self.bound.insert(id, v);
        v
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteResult(name));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::RowSoftmax(a, _)
            | Op::LayerNorm(a, _)
            | Op::L2Normalize(a)
            | Op::RowNorms(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::MinRows(a, _)
            | Op::Element(a, _, _) => vec![*a],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    // ---- forward operators ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v, "mul")
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let r = self.value(row).clone();
        let v = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) + r.get(0, j));
        self.push(Op::AddRow(a, row), v, "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1×cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let r = self.value(row).clone();
        let v = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) * r.get(0, j));
        self.push(Op::MulRow(a, row), v, "mul_row")
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: sa,
                rhs: sc,
            });
        }
        let c = self.value(col).clone();
        let v = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) * c.get(i, 0));
        self.push(Op::MulCol(a, col), v, "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v, "add_scalar")
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.scale(a, -T::one())?;
        self.add_scalar(n, T::one())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                v.row_mut(i)[off..off + src.cols()].copy_from_slice(src.row(i));
                off += src.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            if src.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: src.shape(),
                });
            }
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), v, "concat_rows")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start >= end || end > src.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: src.shape(),
                rhs: (start, end),
            });
        }
        let v = Matrix::from_vec(
            end - start,
            src.cols(),
            src.data()[start * src.cols()..end * src.cols()].to_vec(),
        )?;
        self.push(Op::SliceRows(a, start), v, "slice_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start >= end || end > src.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: src.shape(),
                rhs: (start, end),
            });
        }
        let v = Matrix::from_fn(src.rows(), end - start, |i, j| src.get(i, start + j));
        self.push(Op::SliceCols(a, start), v, "slice_cols")
    }

    /// Rows at fixed `indices` (lookup, e.g. token embeddings).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: src.shape(),
                rhs: (bad, 0),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * src.cols());
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::from_vec(indices.len(), src.cols(), data)?;
        self.push(Op::GatherRows(a, indices.to_vec()), v, "gather_rows")
    }

    /// Rows chosen by a data-dependent selection; the indices are recorded
    /// as decisions and carry no gradient, the selected rows do.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.decisions.extend_from_slice(indices);
        self.decisions.push(usize::MAX);
        self.gather_rows(a, indices)
    }

    /// Softmax of each row of `a / temperature`.
    pub fn row_softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let src = self.value(a);
        let t = temperature.f64();
        let mut v = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let row = src.row(i);
            let max = row.iter().map(|x| x.f64() / t).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x.f64() / t - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (o, e) in v.row_mut(i).iter_mut().zip(exps) {
                *o = T::of(e / denom);
            }
        }
        self.push(Op::RowSoftmax(a, temperature), v, "row_softmax")
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let (mean, inv) = row_stats(src.row(i), eps.f64());
            for (o, x) in v.row_mut(i).iter_mut().zip(src.row(i)) {
                *o = T::of((x.f64() - mean) * inv);
            }
        }
        self.push(Op::LayerNorm(a, eps), v, "layer_norm")
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let n = src.row_norm(i).max(NORM_EPS);
            for (o, x) in v.row_mut(i).iter_mut().zip(src.row(i)) {
                *o = T::of(x.f64() / n);
            }
        }
        self.push(Op::L2Normalize(a), v, "l2_normalize")
    }

    /// L2 norm of each row, as a `rows×1` column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows(), 1, |i, _| T::of(src.row_norm(i)));
        self.push(Op::RowNorms(a), v, "row_norms")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), v, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| {
            let x = x.f64();
            T::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
        });
        self.push(Op::Gelu(a), v, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| T::of(sigmoid(x.f64())));
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v, "exp")
    }

    /// `log(max(x, 1e-8))`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| T::of(x.f64().max(LOG_CLAMP).ln()));
        self.push(Op::Log(a), v, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push(Op::Abs(a), v, "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(T::of(self.value(a).sum()));
        self.push(Op::SumAll(a), v, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let v = Matrix::scalar(T::of(src.sum() / src.len() as f64));
        self.push(Op::MeanAll(a), v, "mean")
    }

    /// Column sums as a `1×cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let v = Matrix::from_fn(1, src.cols(), |_, j| {
            T::of((0..src.rows()).map(|i| src.get(i, j).f64()).sum())
        });
        self.push(Op::SumRows(a), v, "sum_rows")
    }

    /// Row sums as a `rows×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows(), 1, |i, _| {
            T::of(src.row(i).iter().map(|x| x.f64()).sum())
        });
        self.push(Op::SumCols(a), v, "sum_cols")
    }

    /// Minimum of each row as a `rows×1` column; ties pick the lowest column.
    pub fn min_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut arg = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = src.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x < row[best] {
                    best = j;
                }
            }
            arg.push(best);
        }
        let v = Matrix::from_fn(src.rows(), 1, |i, _| src.get(i, arg[i]));
        self.decisions.extend_from_slice(&arg);
        self.decisions.push(usize::MAX);
        self.push(Op::MinRows(a, arg), v, "min_rows")
    }

    /// Entry `(r, c)` as a `1×1` node.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let src = self.value(a);
        if r >= src.rows() || c >= src.cols() {
            return Err(Error::ShapeMismatch {
                op: "element",
                lhs: src.shape(),
                rhs: (r, c),
            });
        }
        let v = Matrix::scalar(src.get(r, c));
        self.push(Op::Element(a, r, c), v, "element")
    }

    /// Pairwise cosine similarities between rows of `a` and rows of `b`.
    /// Computed as `a·b / sqrt(|a|²|b|²)`, so identical rows give exactly 1.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                lhs: sa,
                rhs: sb,
            });
        }
        let (x, y) = (self.value(a), self.value(b));
        let nx = sq_norms(x);
        let ny = sq_norms(y);
        let v = Matrix::from_fn(sa.0, sb.0, |i, j| {
            T::of((dot(x.row(i), y.row(j)) / (nx[i] * ny[j]).sqrt()).clamp(-1.0, 1.0))
        });
        self.push(Op::Cosine(a, b), v, "cosine_similarity")
    }

    /// Row-aligned cosine similarity `cos(a_i, b_i)` as a `rows×1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        self.sum_cols(prod)
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, ig) in self.vjp(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(b))?;
                let gb = val(a).transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |x, y| x * y)),
                (*b, g.zip_map(val(a), |x, y| x * y)),
            ],
            Op::AddRow(a, row) => {
                let gr = Matrix::from_fn(1, g.cols(), |_, j| {
                    T::of((0..g.rows()).map(|i| g.get(i, j).f64()).sum())
                });
                vec![(*a, g.clone()), (*row, gr)]
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(a), val(row));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * rv.get(0, j));
                let gr = Matrix::from_fn(1, g.cols(), |_, j| {
                    T::of(
                        (0..g.rows())
                            .map(|i| g.get(i, j).f64() * av.get(i, j).f64())
                            .sum(),
                    )
                });
                vec![(*a, ga), (*row, gr)]
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(a), val(col));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cv.get(i, 0));
                let gc = Matrix::from_fn(g.rows(), 1, |i, _| T::of(dot(g.row(i), av.row(i))));
                vec![(*a, ga), (*col, gc)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = val(p).cols();
                    res.push((*p, Matrix::from_fn(g.rows(), c, |i, j| g.get(i, off + j))));
                    off += c;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let r = val(p).rows();
                    res.push((*p, Matrix::from_fn(r, g.cols(), |i, j| g.get(off + i, j))));
                    off += r;
                }
                res
            }
            Op::SliceRows(a, start) => {
                let src = val(a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                vec![(*a, ga)]
            }
            Op::SliceCols(a, start) => {
                let src = val(a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(a, indices) => {
                let src = val(a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (acc, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *acc = *acc + x;
                    }
                }
                vec![(*a, ga)]
            }
            Op::RowSoftmax(a, t) => {
                let t = t.f64();
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let s = dot(g.row(i), out.row(i));
                    for j in 0..out.cols() {
                        let y = out.get(i, j).f64();
                        ga.set(i, j, T::of(y * (g.get(i, j).f64() - s) / t));
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm(a, eps) => {
                let src = val(a);
                let n = src.cols() as f64;
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let (_, inv) = row_stats(src.row(i), eps.f64());
                    let gsum: f64 = g.row(i).iter().map(|x| x.f64()).sum();
                    let gx: f64 = dot(g.row(i), out.row(i));
                    for j in 0..src.cols() {
                        let xhat = out.get(i, j).f64();
                        let v = inv / n * (n * g.get(i, j).f64() - gsum - xhat * gx);
                        ga.set(i, j, T::of(v));
                    }
                }
                vec![(*a, ga)]
            }
            Op::L2Normalize(a) => {
                let src = val(a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let norm = src.row_norm(i);
                    if norm < NORM_EPS {
                        for j in 0..src.cols() {
                            ga.set(i, j, T::of(g.get(i, j).f64() / NORM_EPS));
                        }
                        continue;
                    }
                    let yg = dot(out.row(i), g.row(i));
                    for j in 0..src.cols() {
                        let v = (g.get(i, j).f64() - out.get(i, j).f64() * yg) / norm;
                        ga.set(i, j, T::of(v));
                    }
                }
                vec![(*a, ga)]
            }
            Op::Cosine(a, b) => {
                let (x, y) = (val(a), val(b));
                let (nx, ny) = (sq_norms(x), sq_norms(y));
                let d = x.cols();
                let mut ga = vec![0.0f64; x.rows() * d];
                let mut gb = vec![0.0f64; y.rows() * d];
                for i in 0..x.rows() {
                    for j in 0..y.rows() {
                        let gij = g.get(i, j).f64();
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j).f64();
                        let s = (nx[i] * ny[j]).sqrt();
                        let ka = if nx[i] > NORM_EPS * NORM_EPS { c / nx[i] } else { 0.0 };
                        let kb = if ny[j] > NORM_EPS * NORM_EPS { c / ny[j] } else { 0.0 };
                        for k in 0..d {
                            let (xa, yb) = (x.get(i, k).f64(), y.get(j, k).f64());
                            ga[i * d + k] += gij * (yb / s - ka * xa);
                            gb[j * d + k] += gij * (xa / s - kb * yb);
                        }
                    }
                }
                let ga = Matrix::from_fn(x.rows(), d, |i, k| T::of(ga[i * d + k]));
                let gb = Matrix::from_fn(y.rows(), d, |j, k| T::of(gb[j * d + k]));
                vec![(*a, ga), (*b, gb)]
            }
            Op::RowNorms(a) => {
                let src = val(a);
                let ga = Matrix::from_fn(src.rows(), src.cols(), |i, j| {
                    let n = out.get(i, 0).f64();
                    if n == 0.0 {
                        T::zero()
                    } else {
                        T::of(g.get(i, 0).f64() * src.get(i, j).f64() / n)
                    }
                });
                vec![(*a, ga)]
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(a), |gi, x| if x > T::zero() { gi } else { T::zero() }),
            )],
            Op::Gelu(a) => vec![(
                *a,
                g.zip_map(val(a), |gi, x| {
                    let x = x.f64();
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let d = 0.5 * (1.0 + th)
                        + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    T::of(gi.f64() * d)
                }),
            )],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gi, y| gi * y * (T::one() - y)))],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |gi, y| gi * y))],
            Op::Log(a) => vec![(
                *a,
                g.zip_map(val(a), |gi, x| {
                    if x.f64() > LOG_CLAMP {
                        gi / x
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Abs(a) => vec![(*a, g.zip_map(val(a), |gi, x| gi * sign(x)))],
            Op::Square(a) => vec![(*a, g.zip_map(val(a), |gi, x| gi * (x + x)))],
            Op::SumAll(a) => {
                let s = val(a);
                vec![(*a, Matrix::filled(s.rows(), s.cols(), g.item()))]
            }
            Op::MeanAll(a) => {
                let s = val(a);
                let v = T::of(g.item().f64() / s.len() as f64);
                vec![(*a, Matrix::filled(s.rows(), s.cols(), v))]
            }
            Op::SumRows(a) => {
                let s = val(a);
                vec![(*a, Matrix::from_fn(s.rows(), s.cols(), |_, j| g.get(0, j)))]
            }
            Op::SumCols(a) => {
                let s = val(a);
                vec![(*a, Matrix::from_fn(s.rows(), s.cols(), |i, _| g.get(i, 0)))]
            }
            Op::MinRows(a, arg) => {
                let s = val(a);
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for (i, &j) in arg.iter().enumerate() {
                    ga.set(i, j, g.get(i, 0));
                }
                vec![(*a, ga)]
            }
            Op::Element(a, r, c) => {
                let s = val(a);
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                ga.set(*r, *c, g.item());
                vec![(*a, ga)]
            }
        };
        Ok(grads)
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = row.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Matrix<f64> {
        Matrix::from_f64(rows, cols, d).unwrap()
    }

    /// Central differences of `f` around `x0` in plain f64.
    fn numeric_grad(x0: &Matrix<f64>, h: f64, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
        (0..x0.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut x = x0.clone();
                    x.data_mut()[k] += delta;
                    let mut g = Graph::new();
                    let v = g.constant(x);
                    let out = f(&mut g, v);
                    g.item(out)
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic_grad(x0: &Matrix<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let out = f(&mut g, x);
        g.backward(out).unwrap();
        g.grad(x).unwrap().to_f64()
    }

    fn check(x0: Matrix<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var + Copy) {
        let a = analytic_grad(&x0, f);
        let n = numeric_grad(&x0, 1e-6, f);
        for (ai, ni) in a.iter().zip(&n) {
            let rel = (ai - ni).abs() / ai.abs().max(ni.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {ai} vs numeric {ni}");
        }
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(m(1, 2, &[0.0, 0.0]));
        let s = g.row_softmax(x, 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_self_is_one() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(m(1, 3, &[0.3, -2.0, 5.0]));
        let c = g.cosine_similarity(v, v).unwrap();
        assert_relative_eq!(g.item(c), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(m(1, 2, &[3.0, 4.0]));
        let n = g.l2_normalize(v).unwrap();
        assert_relative_eq!(g.value(n).get(0, 0), 0.6, epsilon = 1e-15);
        assert_relative_eq!(g.value(n).get(0, 1), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(m(1, 3, &[1.0, -2.0, 7.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_input_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(m(1, 2, &[1.0, 2.0]));
        let y = g.input(m(1, 2, &[3.0, 4.0]));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).map(|m| m.to_f64()).unwrap_or(vec![0.0; 2]);
        assert_eq!(gx, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::<f64>::new();
        let x = g.input(m(1, 3, &[0.5, -1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss((1, 2)))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_result_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Matrix::scalar(100.0));
        assert!(matches!(g.exp(a), Err(Error::NonFiniteResult("exp"))));
    }

    #[test]
    fn log_is_clamped() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Matrix::scalar(0.0));
        let l = g.log(a).unwrap();
        assert_relative_eq!(g.item(l), (1e-8f64).ln());
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let c = m(1, 4, &[0.2, -0.7, 1.1, 0.4]);
        let x0 = m(1, 4, &[1.0, 0.5, -0.3, 2.0]);
        let f = move |g: &mut Graph<f64>, x: Var| {
            let cv = g.constant(c.clone());
            g.cosine_similarity(x, cv).unwrap()
        };
        // step 1e-4, relative tolerance 1e-4
        let a = analytic_grad(&x0, &f);
        let n = numeric_grad(&x0, 1e-4, &f);
        for (ai, ni) in a.iter().zip(&n) {
            assert!((ai - ni).abs() / ai.abs().max(ni.abs()) < 1e-4);
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let x0 = m(2, 3, &[0.3, -1.2, 0.8, 1.5, -0.4, 0.1]);
        check(x0.clone(), |g, x| {
            let a = g.gelu(x).unwrap();
            let b = g.sigmoid(a).unwrap();
            let c = g.exp(b).unwrap();
            let d = g.square(c).unwrap();
            let e = g.abs(x).unwrap();
            let f = g.mul(d, e).unwrap();
            g.mean(f).unwrap()
        });
        check(m(2, 2, &[0.3, 1.2, 0.8, 1.5]), |g, x| {
            let a = g.log(x).unwrap();
            g.sum(a).unwrap()
        });
    }

    #[test]
    fn structural_ops_gradcheck() {
        let x0 = m(3, 4, &[0.3, -1.2, 0.8, 1.5, -0.4, 0.1, 0.9, -0.6, 0.2, 0.7, -1.1, 0.05]);
        check(x0, |g, x| {
            let t = g.transpose(x).unwrap();
            let p = g.matmul(x, t).unwrap();
            let s = g.row_softmax(p, 0.5).unwrap();
            let ln = g.layer_norm(x, 1e-5).unwrap();
            let q = g.matmul(s, ln).unwrap();
            let a = g.slice_rows(q, 1, 3).unwrap();
            let b = g.slice_cols(q, 0, 2).unwrap();
            let bt = g.transpose(b).unwrap();
            let c = g.concat_cols(&[a, bt]).unwrap();
            let r = g.sum_rows(c).unwrap();
            let cs = g.sum_cols(x).unwrap();
            let q2 = g.mul_col(x, cs).unwrap();
            let r2 = g.sum_rows(q2).unwrap();
            let w = g.slice_cols(r, 0, 4).unwrap();
            let z = g.mul_row(x, w).unwrap();
            let z = g.add_row(z, r2).unwrap();
            let sel = g.gather_rows(z, &[2, 0, 2]).unwrap();
            let cr = g.concat_rows(&[sel, x]).unwrap();
            let n = g.l2_normalize(cr).unwrap();
            let rn = g.row_norms(cr).unwrap();
            let mn = g.min_rows(n).unwrap();
            let e = g.element(rn, 1, 0).unwrap();
            let s1 = g.sum(mn).unwrap();
            let s1 = g.scale(s1, 0.3).unwrap();
            let s1 = g.add_scalar(s1, 2.0).unwrap();
            let e2 = g.sub(s1, e).unwrap();
            g.add(e2, e).unwrap()
        });
    }
}
