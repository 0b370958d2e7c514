//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! An [`ExprGraph`] is an append-only arena of [`ExprNode`]s; node indices
//! are therefore already topologically ordered, so `forward` is a single
//! in-order sweep and `backward` a reverse sweep with gradient
//! accumulation by summation. Graphs are rebuilt per patient per training
//! step (lesion counts vary), confined to one thread, and deterministic:
//! dropout enters only as pre-sampled mask constants.

mod adam;
mod gradcheck;

pub use adam::AdamState;
pub use gradcheck::{check_gradients, kink_margin, GradCheckEntry, GradCheckReport};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("autodiff contract violation: {0}")]
    Contract(String),
}

pub type DiffResult<T> = Result<T, DiffError>;

/// Handle to a node in an [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Operation kind, with op-specific constants baked in at build time.
#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf holding data or a parameter.
    Input,
    MatMul,
    Add,
    /// Horizontal concatenation `[a || b]`.
    ConcatCols,
    /// Multiplication by a fixed scalar.
    Scale(f64),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    /// Softmax independently over each row, with per-row max subtraction.
    RowSoftmax,
    /// Column-wise max over rows: `m x n -> 1 x n`.
    RowMaxPool,
    /// Elementwise product with a pre-sampled 0 / (1/(1-p)) mask.
    DropoutMask(Matrix),
    Exp,
    Neg,
    /// Row-major reinterpretation to `rows x cols`.
    Reshape(usize, usize),
    /// Each input row repeated `k` times consecutively: row `i*k+t` = input row `i`.
    RepeatRows(usize),
    /// Whole input stacked `k` times: row `t*m+r` = input row `r`.
    TileRows(usize),
    /// Scalar weighted binary cross-entropy against a fixed 0/1 label.
    WeightedBce { label: f64, pos_weight: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::ConcatCols => "concat-cols",
            Op::Scale(_) => "scale",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::RowSoftmax => "row-softmax",
            Op::RowMaxPool => "row-max-pool",
            Op::DropoutMask(_) => "dropout-mask",
            Op::Exp => "exp",
            Op::Neg => "neg",
            Op::Reshape(_, _) => "reshape",
            Op::RepeatRows(_) => "repeat-rows",
            Op::TileRows(_) => "tile-rows",
            Op::WeightedBce { .. } => "weighted-bce",
        }
    }
}

/// One node of the computation graph.
#[derive(Debug, Clone)]
pub struct ExprNode {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Option<Matrix>,
    pub grad: Option<Matrix>,
    pub requires_grad: bool,
    pub name: Option<String>,
}

/// Append-only expression arena.
#[derive(Debug, Default)]
pub struct ExprGraph {
    nodes: Vec<ExprNode>,
    #[cfg(test)]
    pub(crate) corrupt_backward_of: Option<&'static str>,
}

const BCE_CLAMP: f64 = 1e-12;

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, requires_grad: bool) -> NodeId {
        for id in &inputs {
            assert!(id.0 < self.nodes.len(), "input node out of range");
        }
        self.nodes.push(ExprNode {
            op,
            inputs,
            value: None,
            grad: None,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, vec![a], rg)
    }

    fn push_binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, vec![a, b], rg)
    }

    /// Data leaf; gradients do not flow into it.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        let id = self.push(Op::Input, vec![], false);
        self.nodes[id.0].value = Some(value);
        id
    }

    /// Learnable leaf; `backward` populates its gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        let id = self.push(Op::Input, vec![], true);
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn param_named(&mut self, value: Matrix, name: &str) -> NodeId {
        let id = self.param(value);
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_binary(Op::MatMul, a, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_binary(Op::Add, a, b)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_binary(Op::ConcatCols, a, b)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push_unary(Op::Scale(k), a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push_unary(Op::LeakyRelu(slope), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::Sigmoid, a)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::RowSoftmax, a)
    }

    pub fn row_max_pool(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::RowMaxPool, a)
    }

    pub fn dropout_mask(&mut self, a: NodeId, mask: Matrix) -> NodeId {
        self.push_unary(Op::DropoutMask(mask), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::Exp, a)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push_unary(Op::Neg, a)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        self.push_unary(Op::Reshape(rows, cols), a)
    }

    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        self.push_unary(Op::RepeatRows(k), a)
    }

    pub fn tile_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        self.push_unary(Op::TileRows(k), a)
    }

    pub fn weighted_bce(&mut self, pred: NodeId, label: f64, pos_weight: f64) -> NodeId {
        self.push_unary(Op::WeightedBce { label, pos_weight }, pred)
    }

    /// Overwrite the value of a leaf (used by the gradient checker).
    pub fn set_value(&mut self, id: NodeId, value: Matrix) {
        assert!(
            matches!(self.nodes[id.0].op, Op::Input),
            "set_value only applies to leaves"
        );
        self.nodes[id.0].value = Some(value);
    }

    pub fn value(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn node(&self, id: NodeId) -> &ExprNode {
        &self.nodes[id.0]
    }

    /// Leaf parameter nodes, in creation order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Recompute values for every node up to and including `root` from the
    /// current leaf values and return the root value.
    pub fn forward(&mut self, root: NodeId) -> DiffResult<Matrix> {
        assert!(root.0 < self.nodes.len(), "root node out of range");
        for id in 0..=root.0 {
            if matches!(self.nodes[id].op, Op::Input) {
                if self.nodes[id].value.is_none() {
                    return Err(DiffError::Contract(format!(
                        "input node #{id} has no value"
                    )));
                }
                continue;
            }
            let value = eval_node(&self.nodes, id)?;
            if !value.all_finite() {
                return Err(DiffError::NonFinite {
                    op: self.nodes[id].op.name(),
                });
            }
            self.nodes[id].value = Some(value);
        }
        Ok(self.nodes[root.0].value.clone().expect("root evaluated"))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate by summation
    /// over all paths; every requires-grad node ends up with `grad` set.
    /// Returns the gradients of the leaf parameters.
    pub fn backward(&mut self, root: NodeId) -> DiffResult<BTreeMap<NodeId, Matrix>> {
        let root_value = self.nodes[root.0]
            .value
            .as_ref()
            .ok_or_else(|| DiffError::Contract("backward before forward".into()))?;
        if root_value.shape() != (1, 1) {
            return Err(DiffError::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }

        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            #[cfg(test)]
            let out_grad = match self.corrupt_backward_of {
                Some(tag) if tag == self.nodes[id].op.name() => out_grad.scale(1.5),
                _ => out_grad,
            };
            propagate(&self.nodes, id, &out_grad, &mut grads)?;
            self.nodes[id].grad = Some(out_grad);
        }

        let mut map = BTreeMap::new();
        for id in self.param_ids() {
            let grad = match self.nodes[id.0].grad.clone() {
                Some(g) => g,
                // Parameter not on any path to the root: zero gradient.
                None => {
                    let shape = self.nodes[id.0].value.as_ref().expect("leaf value");
                    Matrix::zeros(shape.rows(), shape.cols())
                }
            };
            map.insert(id, grad);
        }
        Ok(map)
    }
}

fn dim_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Dim { op, detail }
}

fn eval_node(nodes: &[ExprNode], id: usize) -> DiffResult<Matrix> {
    let node = &nodes[id];
    let op_name = node.op.name();
    let val = |i: usize| -> &Matrix {
        nodes[node.inputs[i].0]
            .value
            .as_ref()
            .expect("inputs evaluated before node")
    };
    match &node.op {
        Op::Input => unreachable!("leaves are not evaluated"),
        Op::MatMul => {
            let (a, b) = (val(0), val(1));
            if a.cols() != b.rows() {
                return Err(dim_err(
                    op_name,
                    format!("{}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                ));
            }
            Ok(a.matmul(b))
        }
        Op::Add => {
            let (a, b) = (val(0), val(1));
            if a.shape() != b.shape() {
                return Err(dim_err(
                    op_name,
                    format!("{}x{} + {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                ));
            }
            Ok(a.add(b))
        }
        Op::ConcatCols => {
            let (a, b) = (val(0), val(1));
            if a.rows() != b.rows() {
                return Err(dim_err(
                    op_name,
                    format!("{}x{} || {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                ));
            }
            let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
            for r in 0..a.rows() {
                let row = &mut out.data_mut()[r * (a.cols() + b.cols())..];
                row[..a.cols()].copy_from_slice(a.row(r));
                row[a.cols()..a.cols() + b.cols()].copy_from_slice(b.row(r));
            }
            Ok(out)
        }
        Op::Scale(k) => Ok(val(0).scale(*k)),
        Op::LeakyRelu(slope) => {
            let s = *slope;
            Ok(val(0).map(|x| if x > 0.0 { x } else { s * x }))
        }
        Op::Relu => Ok(val(0).map(|x| x.max(0.0))),
        Op::Sigmoid => Ok(val(0).map(sigmoid)),
        Op::RowSoftmax => Ok(row_softmax(val(0))),
        Op::RowMaxPool => {
            let a = val(0);
            if a.rows() == 0 {
                return Err(dim_err(op_name, "empty input".into()));
            }
            let mut out = Matrix::zeros(1, a.cols());
            for c in 0..a.cols() {
                let mut best = a.get(0, c);
                for r in 1..a.rows() {
                    best = best.max(a.get(r, c));
                }
                out.set(0, c, best);
            }
            Ok(out)
        }
        Op::DropoutMask(mask) => {
            let a = val(0);
            if a.shape() != mask.shape() {
                return Err(dim_err(
                    op_name,
                    format!(
                        "value {}x{} vs mask {}x{}",
                        a.rows(),
                        a.cols(),
                        mask.rows(),
                        mask.cols()
                    ),
                ));
            }
            Ok(a.mul_elem(mask))
        }
        Op::Exp => Ok(val(0).map(f64::exp)),
        Op::Neg => Ok(val(0).map(|x| -x)),
        Op::Reshape(rows, cols) => {
            let a = val(0);
            if a.len() != rows * cols {
                return Err(dim_err(
                    op_name,
                    format!("{}x{} -> {}x{}", a.rows(), a.cols(), rows, cols),
                ));
            }
            Ok(Matrix::from_vec(*rows, *cols, a.data().to_vec()))
        }
        Op::RepeatRows(k) => {
            let a = val(0);
            let mut out = Matrix::zeros(a.rows() * k, a.cols());
            for r in 0..a.rows() {
                for t in 0..*k {
                    let dst = (r * k + t) * a.cols();
                    out.data_mut()[dst..dst + a.cols()].copy_from_slice(a.row(r));
                }
            }
            Ok(out)
        }
        Op::TileRows(k) => {
            let a = val(0);
            let mut out = Matrix::zeros(a.rows() * k, a.cols());
            for t in 0..*k {
                for r in 0..a.rows() {
                    let dst = (t * a.rows() + r) * a.cols();
                    out.data_mut()[dst..dst + a.cols()].copy_from_slice(a.row(r));
                }
            }
            Ok(out)
        }
        Op::WeightedBce { label, pos_weight } => {
            let p = val(0);
            if p.shape() != (1, 1) {
                return Err(dim_err(
                    op_name,
                    format!("prediction must be 1x1, got {}x{}", p.rows(), p.cols()),
                ));
            }
            let p = p.scalar_value().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let loss = -(pos_weight * label * p.ln() + (1.0 - label) * (1.0 - p).ln());
            Ok(Matrix::scalar(loss))
        }
    }
}

/// Add `out_grad`-induced contributions to the gradients of `nodes[id]`'s inputs.
fn propagate(
    nodes: &[ExprNode],
    id: usize,
    out_grad: &Matrix,
    grads: &mut [Option<Matrix>],
) -> DiffResult<()> {
    let node = &nodes[id];
    let val = |i: usize| -> &Matrix {
        nodes[node.inputs[i].0]
            .value
            .as_ref()
            .expect("inputs evaluated")
    };
    let accumulate = |grads: &mut [Option<Matrix>], input: usize, contribution: Matrix| {
        let target = node.inputs[input].0;
        if !nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    };

    match &node.op {
        Op::Input => {}
        Op::MatMul => {
            let (a, b) = (val(0), val(1));
            if nodes[node.inputs[0].0].requires_grad {
                accumulate(grads, 0, out_grad.matmul_nt(b));
            }
            if nodes[node.inputs[1].0].requires_grad {
                accumulate(grads, 1, a.matmul_tn(out_grad));
            }
        }
        Op::Add => {
            accumulate(grads, 0, out_grad.clone());
            accumulate(grads, 1, out_grad.clone());
        }
        Op::ConcatCols => {
            let (a, b) = (val(0), val(1));
            let mut ga = Matrix::zeros(a.rows(), a.cols());
            let mut gb = Matrix::zeros(b.rows(), b.cols());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    ga.set(r, c, out_grad.get(r, c));
                }
                for c in 0..b.cols() {
                    gb.set(r, c, out_grad.get(r, a.cols() + c));
                }
            }
            accumulate(grads, 0, ga);
            accumulate(grads, 1, gb);
        }
        Op::Scale(k) => accumulate(grads, 0, out_grad.scale(*k)),
        Op::LeakyRelu(slope) => {
            let x = val(0);
            let mut g = out_grad.clone();
            for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                if *xv <= 0.0 {
                    *gv *= slope;
                }
            }
            accumulate(grads, 0, g);
        }
        Op::Relu => {
            let x = val(0);
            let mut g = out_grad.clone();
            for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                if *xv <= 0.0 {
                    *gv = 0.0;
                }
            }
            accumulate(grads, 0, g);
        }
        Op::Sigmoid => {
            let y = node.value.as_ref().expect("value set");
            let mut g = out_grad.clone();
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                *gv *= yv * (1.0 - yv);
            }
            accumulate(grads, 0, g);
        }
        Op::RowSoftmax => {
            let y = node.value.as_ref().expect("value set");
            let mut g = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = (0..y.cols()).map(|c| out_grad.get(r, c) * y.get(r, c)).sum();
                for c in 0..y.cols() {
                    g.set(r, c, y.get(r, c) * (out_grad.get(r, c) - dot));
                }
            }
            accumulate(grads, 0, g);
        }
        Op::RowMaxPool => {
            // Ties route the gradient to the first maximal row.
            let x = val(0);
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for c in 0..x.cols() {
                let mut best_r = 0;
                for r in 1..x.rows() {
                    if x.get(r, c) > x.get(best_r, c) {
                        best_r = r;
                    }
                }
                g.set(best_r, c, out_grad.get(0, c));
            }
            accumulate(grads, 0, g);
        }
        Op::DropoutMask(mask) => accumulate(grads, 0, out_grad.mul_elem(mask)),
        Op::Exp => {
            let y = node.value.as_ref().expect("value set");
            accumulate(grads, 0, out_grad.mul_elem(y));
        }
        Op::Neg => accumulate(grads, 0, out_grad.scale(-1.0)),
        Op::Reshape(_, _) => {
            let a = val(0);
            accumulate(
                grads,
                0,
                Matrix::from_vec(a.rows(), a.cols(), out_grad.data().to_vec()),
            );
        }
        Op::RepeatRows(k) => {
            let a = val(0);
            let mut g = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                for t in 0..*k {
                    for c in 0..a.cols() {
                        let v = g.get(r, c) + out_grad.get(r * k + t, c);
                        g.set(r, c, v);
                    }
                }
            }
            accumulate(grads, 0, g);
        }
        Op::TileRows(k) => {
            let a = val(0);
            let mut g = Matrix::zeros(a.rows(), a.cols());
            for t in 0..*k {
                for r in 0..a.rows() {
                    for c in 0..a.cols() {
                        let v = g.get(r, c) + out_grad.get(t * a.rows() + r, c);
                        g.set(r, c, v);
                    }
                }
            }
            accumulate(grads, 0, g);
        }
        Op::WeightedBce { label, pos_weight } => {
            let p = val(0).scalar_value().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let dp = -(pos_weight * label / p) + (1.0 - label) / (1.0 - p);
            accumulate(grads, 0, Matrix::scalar(out_grad.scalar_value() * dp));
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..a.cols() {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..a.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}
