//! A small tape-based reverse-mode differentiation engine over dense matrices.
//!
//! Values are computed eagerly as nodes are appended, so the tape is always in
//! evaluation order and every node's inputs precede it. [`Graph::gradient`]
//! walks the tape backwards from a scalar node and returns adjoints for every
//! trainable leaf.
//!
//! Inverses and log-determinants of PSD matrices go through a Cholesky factor
//! cached on the node; their adjoints reuse the same factor.

use std::collections::BTreeMap;

use super::cholesky::{cholesky, CholeskyFactor};
use super::Matrix;
use crate::error::{FitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    SubCol(NodeId, NodeId),
    Film {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Standardize {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    LogSumExpRows(NodeId),
    SqDist(NodeId, NodeId),
    SelectRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    PsdSolve {
        a: NodeId,
        b: NodeId,
        factor: CholeskyFactor,
    },
    LogDet {
        a: NodeId,
        factor: CholeskyFactor,
    },
    Pick(NodeId, usize, usize),
    StopGrad,
    ArgmaxRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleConst(..) => "scale_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::SubCol(..) => "sub_col",
            Op::Film { .. } => "film",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Standardize { .. } => "standardize",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SqDist(..) => "sq_dist",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::PsdSolve { .. } => "psd_solve",
            Op::LogDet { .. } => "logdet",
            Op::Pick(..) => "pick",
            Op::StopGrad => "stop_grad",
            Op::ArgmaxRows => "argmax_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    trainable: bool,
    needs_grad: bool,
}

/// Computation record. Single writer while building, read-only afterwards.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of a scalar with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Matrix> {
        self.grads.get(&leaf)
    }

    pub fn wrt(&self, leaf: NodeId) -> &Matrix {
        self.grads
            .get(&leaf)
            .expect("gradient requested for a node that is not a trainable leaf")
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> FitError {
    FitError::DimensionMismatch(format!("{op}: {a:?} vs {b:?}"))
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn push(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> NodeId {
        let needs_grad = !matches!(op, Op::StopGrad)
            && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: false,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    pub fn trainable(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: true,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    /// `s·a` for a 1x1 node `s`.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("scale factor", self.shape(s), (1, 1)));
        }
        let v = self.value(a).scale(self.value(s).item());
        Ok(self.push(Op::Scale(a, s), v, &[a, s]))
    }

    pub fn scale_const(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::ScaleConst(a, s), v, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    fn check_row(&self, a: NodeId, row: NodeId, op: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err(op, self.shape(a), self.shape(row)));
        }
        Ok(())
    }

    /// Adds a 1 x cols row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v, &[a, row]))
    }

    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row(a, row, "sub_row")?;
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x -= y;
            }
        }
        Ok(self.push(Op::SubRow(a, row), v, &[a, row]))
    }

    /// Subtracts a rows x 1 column from every column of `a`.
    pub fn sub_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(shape_err("sub_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for (i, &ci) in c.iter().enumerate() {
            for x in v.row_mut(i) {
                *x -= ci;
            }
        }
        Ok(self.push(Op::SubCol(a, col), v, &[a, col]))
    }

    /// Feature-wise affine map `x·γ + β`, with γ and β as 1 x channels rows
    /// broadcast over the rows of `x`.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.check_row(x, gamma, "film gamma")?;
        self.check_row(x, beta, "film beta")?;
        let v = film_rows(self.value(x), self.value(gamma), self.value(beta));
        Ok(self.push(Op::Film { x, gamma, beta }, v, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.as_slice().len() as f64);
        self.push(Op::Mean(a), v, &[a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_sums();
        self.push(Op::RowSum(a), v, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, &[a])
    }

    /// Zero-mean, unit-variance standardization of each row over its columns.
    pub fn standardize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let (v, inv_std) = standardize_rows(self.value(a), eps);
        self.push(Op::Standardize { x: a, inv_std }, v, &[a])
    }

    /// Row-wise `log Σ_j exp(a_ij)` as a rows x 1 column.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::col_vector(
            &(0..m.rows())
                .map(|i| logsumexp(m.row(i)))
                .collect::<Vec<_>>(),
        );
        self.push(Op::LogSumExpRows(a), v, &[a])
    }

    /// `a - logsumexp_rows(a)` broadcast over columns.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let lse = self.logsumexp_rows(a);
        self.sub_col(a, lse)
    }

    /// Pairwise squared Euclidean distances between rows of `a` (n x d) and
    /// rows of `b` (m x d), as an n x m matrix.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(shape_err("sq_dist", am.shape(), bm.shape()));
        }
        let mut v = Matrix::zeros(am.rows(), bm.rows());
        for i in 0..am.rows() {
            for j in 0..bm.rows() {
                let d: f64 = am
                    .row(i)
                    .iter()
                    .zip(bm.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                v.set(i, j, d);
            }
        }
        Ok(self.push(Op::SqDist(a, b), v, &[a, b]))
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(FitError::DimensionMismatch(format!(
                "select_rows: index {bad} out of {rows} rows"
            )));
        }
        let v = self.value(a).select_rows(idx);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), v, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| FitError::DimensionMismatch("concat_cols of nothing".into()))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    /// `a⁻¹·b` for symmetric positive definite `a`.
    pub fn psd_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let factor = cholesky(self.value(a), 0.0)?;
        let v = factor.solve(self.value(b))?;
        Ok(self.push(Op::PsdSolve { a, b, factor }, v, &[a, b]))
    }

    /// `log det a` for symmetric positive definite `a`.
    pub fn logdet(&mut self, a: NodeId) -> Result<NodeId> {
        let factor = cholesky(self.value(a), 0.0)?;
        let v = Matrix::scalar(factor.logdet());
        Ok(self.push(Op::LogDet { a, factor }, v, &[a]))
    }

    pub fn pick(&mut self, a: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if i >= r || j >= c {
            return Err(FitError::DimensionMismatch(format!(
                "pick ({i},{j}) from {r}x{c}"
            )));
        }
        let v = Matrix::scalar(self.value(a).get(i, j));
        Ok(self.push(Op::Pick(a, i, j), v, &[a]))
    }

    /// Passes the value through and blocks gradient flow.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad, v, &[a])
    }

    /// Index of the row maximum (ties to the lowest index), as a rows x 1
    /// column. Not differentiable.
    pub fn argmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::col_vector(
            &(0..m.rows())
                .map(|i| argmax(m.row(i)) as f64)
                .collect::<Vec<_>>(),
        );
        self.push(Op::ArgmaxRows, v, &[a])
    }

    /// Reverse-mode adjoints of scalar node `loss` for every trainable leaf.
    /// Leaves unreachable from `loss` get a zero gradient.
    pub fn gradient(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("gradient of non-scalar", self.shape(loss), (1, 1)));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let g = adj
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                grads.insert(NodeId(id), g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |target: NodeId, delta: Matrix| -> Result<()> {
            if !self.nodes[target.0].needs_grad {
                return Ok(());
            }
            match &mut adj[target.0] {
                Some(existing) => existing.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::Scale(a, s) => {
                let sv = self.value(*s).item();
                acc(*a, g.scale(sv))?;
                acc(*s, Matrix::scalar(g.hadamard(self.value(*a))?.sum()))?;
            }
            Op::ScaleConst(a, s) => acc(*a, g.scale(*s))?,
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(&self.value(*b).transpose())?)?;
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::AddRow(a, r) => {
                acc(*a, g.clone())?;
                acc(*r, g.col_sums())?;
            }
            Op::SubRow(a, r) => {
                acc(*a, g.clone())?;
                acc(*r, g.col_sums().scale(-1.0))?;
            }
            Op::SubCol(a, c) => {
                acc(*a, g.clone())?;
                acc(*c, g.row_sums().scale(-1.0))?;
            }
            Op::Film { x, gamma, beta } => {
                let gv = self.value(*gamma).as_slice();
                let xv = self.value(*x);
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    for (v, &gm) in gx.row_mut(i).iter_mut().zip(gv) {
                        *v *= gm;
                    }
                }
                acc(*x, gx)?;
                acc(*gamma, g.hadamard(xv)?.col_sums())?;
                acc(*beta, g.col_sums())?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64))?;
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).fill(g.get(i, 0));
                }
                acc(*a, d)?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(out)?)?,
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| gi / x)?)?,
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?,
            )?,
            Op::Standardize { x, inv_std } => {
                let c = out.cols() as f64;
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let mean_g = gi.iter().sum::<f64>() / c;
                    let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        *v = inv_std[i] * (gi[j] - mean_g - y[j] * mean_gy);
                    }
                }
                acc(*x, d)?;
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let lse = out.get(i, 0);
                    let gi = g.get(i, 0);
                    for (v, &x) in d.row_mut(i).iter_mut().zip(av.row(i)) {
                        *v = gi * (x - lse).exp();
                    }
                }
                acc(*a, d)?;
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..av.cols() {
                            let diff = gij * (av.get(i, k) - bv.get(j, k));
                            ga.add_at(i, k, diff);
                            gb.add_at(j, k, -diff);
                        }
                    }
                }
                acc(*a, ga)?;
                acc(*b, gb)?;
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (v, &gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *v += gv;
                    }
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    acc(p, d)?;
                }
            }
            Op::PsdSolve { a, b, factor } => {
                // x = A⁻¹b  =>  ḃ = A⁻¹ẋ,  Ā = -sym(ḃ xᵀ)
                let gb = factor.solve(g)?;
                if self.nodes[a.0].needs_grad {
                    let ga = gb.matmul(&out.transpose())?.symmetrize().scale(-1.0);
                    acc(*a, ga)?;
                }
                acc(*b, gb)?;
            }
            Op::LogDet { a, factor } => {
                acc(*a, factor.inverse().scale(g.item()))?;
            }
            Op::Pick(a, i, j) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                d.set(*i, *j, g.item());
                acc(*a, d)?;
            }
            Op::StopGrad => {}
            op @ Op::ArgmaxRows => {
                return Err(FitError::UnsupportedNode {
                    node: id,
                    op: op.name(),
                })
            }
        }
        Ok(())
    }
}

/// `x·γ + β` row-broadcast; shared by the tape and the plain forward pass so
/// both produce identical bits.
pub(crate) fn film_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let (g, b) = (gamma.as_slice(), beta.as_slice());
    let mut v = x.clone();
    for i in 0..v.rows() {
        for ((x, &gm), &bt) in v.row_mut(i).iter_mut().zip(g).zip(b) {
            *x = gm * *x + bt;
        }
    }
    v
}

pub(crate) fn standardize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let c = x.cols() as f64;
    let mut v = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..v.rows() {
        let row = v.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c;
        let s = 1.0 / (var + eps).sqrt();
        for a in row.iter_mut() {
            *a = (*a - mean) * s;
        }
        inv.push(s);
    }
    (v, inv)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Ties break toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
