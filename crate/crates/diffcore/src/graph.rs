//! The tape: a forward-recorded list of primitive operations plus the
//! reverse sweep over it.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the reverse sweep is a single backwards pass.
//! Gradients of leaves are *accumulated*: running [`Graph::backward`] twice
//! without a new forward pass doubles every leaf gradient.

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Layer-norm denominator guard.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    GatherRows(Var, Vec<usize>),
    ColSlice(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    RowNorm(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Dot(Var, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::GatherRows(..) => "gather_rows",
            Op::ColSlice(..) => "col_slice",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::RowNorm(_) => "row_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-writer computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf or parameter node. Zero if the node was
    /// never reached by a backward sweep.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    /// Resets all leaf gradients to exactly zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Free input that collects a gradient on backward.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshot of a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push(p.value().clone(), Op::Param(id), !p.is_frozen())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm_nn(ta, tb, out.data_mut());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(DiffError::Shape {
                op: "matmul_nt",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm_nt(ta, tb, out.data_mut());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(DiffError::Shape {
                op: "add_row",
                lhs: tx.shape(),
                rhs: tr.shape(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// Multiplies row `i` of `x` by `s[i]`, with `s` an `n x 1` column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.cols() != 1 || ts.rows() != tx.rows() {
            return Err(DiffError::Shape {
                op: "scale_rows",
                lhs: tx.shape(),
                rhs: ts.shape(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let k = ts.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::ScaleRows(x, s), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulScalar(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += k);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.rows()) {
            return Err(DiffError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {:?}", tx.shape()),
            });
        }
        let out = tx.select_rows(indices);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, indices.to_vec()), rg)
    }

    /// Columns `start..start + len` of `x`.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() || len == 0 {
            return Err(DiffError::Invalid {
                op: "col_slice",
                msg: format!("columns {start}..{} out of range for {:?}", start + len, tx.shape()),
            });
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ColSlice(x, start), rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Natural log; non-positive input is a hard error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Ln(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = Tensor::zeros(tx.rows(), 1);
        for r in 0..tx.rows() {
            out.data_mut()[r] = tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::RowNorm(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() == 0 {
            return Err(DiffError::Invalid {
                op: "softmax_rows",
                msg: "empty row dimension".into(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance followed by a
    /// `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(DiffError::Invalid {
                op: "layer_norm",
                msg: format!("need at least 2 features, got {d}"),
            });
        }
        if tg.shape() != (1, d) || tb.shape() != (1, d) {
            return Err(DiffError::Shape {
                op: "layer_norm",
                lhs: tg.shape(),
                rhs: tb.shape(),
            });
        }
        let mut xhat = Tensor::zeros(tx.rows(), d);
        let mut out = Tensor::zeros(tx.rows(), d);
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (h, v) in xr.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xr = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xr[c] * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Scalar `Σ x ⊙ w` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(DiffError::Shape {
                op: "dot",
                lhs: tx.shape(),
                rhs: weights.shape(),
            });
        }
        let s: f64 = tx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Dot(x, weights), rg)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    let node = &mut self.nodes[i];
                    match node.grad.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(g),
                    }
                    continue;
                }
                _ => {}
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| {
                let s = nodes[v.0].value.shape();
                Tensor::zeros(s.0, s.1)
            });
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, &|s| gemm_nt(g, tb, s.data_mut()));
                send(*b, &|s| gemm_tn(ta, g, s.data_mut()));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                // c = a bᵀ: da = g b, db = gᵀ a
                send(*a, &|s| gemm_nn(g, tb, s.data_mut()));
                send(*b, &|s| gemm_tn(g, ta, s.data_mut()));
            }
            Op::Add(a, b) => {
                send(*a, &|s| s.add_assign(g));
                send(*b, &|s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| s.add_assign(g));
                send(*b, &|s| {
                    for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, &|s| axpy_prod(s.data_mut(), g.data(), tb.data()));
                send(*b, &|s| axpy_prod(s.data_mut(), g.data(), ta.data()));
            }
            Op::AddRow(x, row) => {
                send(*x, &|s| s.add_assign(g));
                send(*row, &|s| {
                    for r in 0..g.rows() {
                        for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ScaleRows(x, sc) => {
                let (tx, ts) = (&nodes[x.0].value, &nodes[sc.0].value);
                send(*x, &|s| {
                    for r in 0..g.rows() {
                        let k = ts.data()[r];
                        for (o, v) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += k * v;
                        }
                    }
                });
                send(*sc, &|s| {
                    for r in 0..g.rows() {
                        let d: f64 = g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum();
                        s.data_mut()[r] += d;
                    }
                });
            }
            Op::MulScalar(x, k) => {
                send(*x, &|s| {
                    for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o += k * v;
                    }
                });
            }
            Op::AddScalar(x) => send(*x, &|s| s.add_assign(g)),
            Op::GatherRows(x, idx) => {
                send(*x, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in s.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ColSlice(x, start) => {
                send(*x, &|s| {
                    for r in 0..g.rows() {
                        let dst = &mut s.row_mut(r)[*start..*start + g.cols()];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                send(*x, &|s| {
                    for ((o, v), xi) in s.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                send(*x, &|s| {
                    for ((o, v), y) in s.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += v * y * (1.0 - y);
                    }
                });
            }
            Op::Ln(x) => {
                let tx = &nodes[x.0].value;
                send(*x, &|s| {
                    for ((o, v), xi) in s.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += v / xi;
                    }
                });
            }
            Op::Abs(x) => {
                let tx = &nodes[x.0].value;
                send(*x, &|s| {
                    for ((o, v), xi) in s.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xi > 0.0 {
                            *o += v;
                        } else if *xi < 0.0 {
                            *o -= v;
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let tx = &nodes[x.0].value;
                send(*x, &|s| {
                    for ((o, v), xi) in s.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xi >= *lo && *xi <= *hi {
                            *o += v;
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let tx = &nodes[x.0].value;
                send(*x, &|s| {
                    for r in 0..tx.rows() {
                        let n = out.data()[r];
                        if n == 0.0 {
                            continue;
                        }
                        let k = g.data()[r] / n;
                        for (o, xi) in s.row_mut(r).iter_mut().zip(tx.row(r)) {
                            *o += k * xi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                send(*x, &|s| {
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in s.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = &nodes[gain.0].value;
                let d = xhat.cols();
                send(*x, &|s| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..xhat.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        for c in 0..d {
                            dxhat[c] = gr[c] * tg.data()[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for ((o, dh), h) in s.row_mut(r).iter_mut().zip(&dxhat).zip(hr) {
                            *o += k * (d as f64 * dh - sum_d - h * sum_dh);
                        }
                    }
                });
                send(*gain, &|s| {
                    for r in 0..xhat.rows() {
                        for ((o, gv), h) in s.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * h;
                        }
                    }
                });
                send(*bias, &|s| {
                    for r in 0..g.rows() {
                        for (o, gv) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let k = g.item();
                send(*x, &|s| s.data_mut().iter_mut().for_each(|o| *o += k));
            }
            Op::Dot(x, w) => {
                let k = g.item();
                send(*x, &|s| {
                    for (o, wi) in s.data_mut().iter_mut().zip(w.data()) {
                        *o += k * wi;
                    }
                });
            }
        }
    }

    /// Parameter nodes on this tape with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g)),
            _ => None,
        })
    }
}

fn axpy_prod(out: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += x * y;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
