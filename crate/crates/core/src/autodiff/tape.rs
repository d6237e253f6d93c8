use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{self, BinaryOp, Broadcast, UnaryOp};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Input value; `requires_grad` decides whether backward reports it.
    Leaf {
        requires_grad: bool,
    },
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Take(NodeId, Vec<usize>),
    ExpandCols(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Sum(x, _)
            | Op::Mean(x, _)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::GatherRows(x, _)
            | Op::Take(x, _)
            | Op::ExpandCols(x, _)
            | Op::Reshape(x, _) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of forward operations.
///
/// Every node keeps its forward value. Parents always precede children, so
/// the node order is a topological order and backward is a single reverse
/// sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`].
    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownNode(id.0))
    }
}

fn eval(op: &Op, v: impl Fn(NodeId) -> Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Unary(k, x) => kernels::unary(*k, &v(*x)),
        Op::Binary(k, x, y) => kernels::binary(*k, &v(*x), &v(*y)),
        Op::MatMul(a, b) => kernels::matmul(&v(*a), &v(*b)),
        Op::Transpose(x) => kernels::transpose(&v(*x)),
        Op::Sum(x, ax) => kernels::sum(&v(*x), *ax),
        Op::Mean(x, ax) => kernels::mean(&v(*x), *ax),
        Op::SoftmaxRows(x) => kernels::softmax_rows(&v(*x)),
        Op::LogSoftmaxRows(x) => kernels::log_softmax_rows(&v(*x)),
        Op::GatherRows(x, idx) => kernels::gather_rows(&v(*x), idx),
        Op::Take(x, idx) => kernels::take(&v(*x), idx),
        Op::ExpandCols(x, c) => kernels::expand_cols(&v(*x), *c),
        Op::Reshape(x, s) => v(*x).reshape(s.clone()),
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

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.check(id)?.value)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    /// An input that backward treats as fixed.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: false }, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn unary(&mut self, kind: UnaryOp, x: NodeId) -> Result<NodeId> {
        let out = kernels::unary(kind, &self.check(x)?.value)?;
        Ok(self.push(Op::Unary(kind, x), out))
    }

    pub fn binary(&mut self, kind: BinaryOp, x: NodeId, y: NodeId) -> Result<NodeId> {
        let out = kernels::binary(kind, &self.check(x)?.value, &self.check(y)?.value)?;
        Ok(self.push(Op::Binary(kind, x, y), out))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, x)
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Abs, x)
    }
    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryOp::ClampMin(c), x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn powf(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.unary(UnaryOp::Pow(p), x)
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryOp::Scale(c), x)
    }
    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryOp::Shift(c), x)
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, x, y)
    }
    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, x, y)
    }
    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, x, y)
    }
    pub fn div(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, x, y)
    }
    pub fn max(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Max, x, y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::matmul(&self.check(a)?.value, &self.check(b)?.value)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::transpose(&self.check(x)?.value)?;
        Ok(self.push(Op::Transpose(x), out))
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let out = kernels::sum(&self.check(x)?.value, axis)?;
        Ok(self.push(Op::Sum(x, axis), out))
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let out = kernels::mean(&self.check(x)?.value, axis)?;
        Ok(self.push(Op::Mean(x, axis), out))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::softmax_rows(&self.check(x)?.value)?;
        Ok(self.push(Op::SoftmaxRows(x), out))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::log_softmax_rows(&self.check(x)?.value)?;
        Ok(self.push(Op::LogSoftmaxRows(x), out))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let out = kernels::gather_rows(&self.check(x)?.value, idx)?;
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), out))
    }

    pub fn take(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let out = kernels::take(&self.check(x)?.value, idx)?;
        Ok(self.push(Op::Take(x, idx.to_vec()), out))
    }

    pub fn expand_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        let out = kernels::expand_cols(&self.check(x)?.value, cols)?;
        Ok(self.push(Op::ExpandCols(x, cols), out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.check(x)?.value.reshape(shape.clone())?;
        Ok(self.push(Op::Reshape(x, shape), out))
    }

    /// Recomputes every non-leaf value from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => eval(op, |id| values[id.0].clone())?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of the scalar `root`.
    ///
    /// Contributions are accumulated in decreasing node order, so the result
    /// is bit-for-bit reproducible. Leaves that require gradients but do not
    /// influence `root` get zero tensors.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = self.check(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones_like(&root_node.value));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contrib) in self.vjp(node, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(&node.value));
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products for the parents of `node` that need them.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Unary(kind, x) => {
                let xv = val(*x);
                let y = &node.value;
                let d: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * unary_deriv(*kind, xi, yi))
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Binary(kind, x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                let bc = kernels::broadcast_kind(xv, yv)?;
                let n = g.len();
                let xi = |i: usize| match bc {
                    Broadcast::LeftScalar => 0,
                    Broadcast::LeftRow => i % xv.len(),
                    _ => i,
                };
                let yi = |i: usize| match bc {
                    Broadcast::RightScalar => 0,
                    Broadcast::RightRow => i % yv.len(),
                    _ => i,
                };
                let (xd, yd, gd) = (xv.data(), yv.data(), g.data());
                if needs(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..n {
                        let (a, b) = (xd[xi(i)], yd[yi(i)]);
                        let d = match kind {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => b,
                            BinaryOp::Div => 1.0 / b,
                            BinaryOp::Max => {
                                if a >= b {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[xi(i)] += gd[i] * d;
                    }
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if needs(*y) {
                    let mut dy = vec![0.0; yv.len()];
                    for i in 0..n {
                        let (a, b) = (xd[xi(i)], yd[yi(i)]);
                        let d = match kind {
                            BinaryOp::Add => 1.0,
                            BinaryOp::Sub => -1.0,
                            BinaryOp::Mul => a,
                            BinaryOp::Div => -a / (b * b),
                            BinaryOp::Max => {
                                if a >= b {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                        };
                        dy[yi(i)] += gd[i] * d;
                    }
                    out.push((*y, Tensor::new(yv.shape().to_vec(), dy)?));
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let bt = kernels::transpose(val(*b))?;
                    out.push((*a, kernels::matmul(g, &bt)?));
                }
                if needs(*b) {
                    let at = kernels::transpose(val(*a))?;
                    out.push((*b, kernels::matmul(&at, g)?));
                }
            }
            Op::Transpose(x) => out.push((*x, kernels::transpose(g)?)),
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xv = val(*x);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / kernels::reduce_count(xv.shape(), *axis) as f64
                } else {
                    1.0
                };
                let d = spread_reduction(xv.shape(), *axis, g, scale)?;
                out.push((*x, d));
            }
            Op::SoftmaxRows(x) => {
                let s = &node.value;
                let (_, k) = s.dims2()?;
                let mut d = Vec::with_capacity(s.len());
                for (srow, grow) in s.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    d.extend(srow.iter().zip(grow).map(|(si, gi)| si * (gi - dot)));
                }
                out.push((*x, Tensor::new(s.shape().to_vec(), d)?));
            }
            Op::LogSoftmaxRows(x) => {
                let ls = &node.value;
                let (_, k) = ls.dims2()?;
                let mut d = Vec::with_capacity(ls.len());
                for (lrow, grow) in ls.data().chunks(k).zip(g.data().chunks(k)) {
                    let gsum: f64 = grow.iter().sum();
                    d.extend(lrow.iter().zip(grow).map(|(li, gi)| gi - li.exp() * gsum));
                }
                out.push((*x, Tensor::new(ls.shape().to_vec(), d)?));
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let (_, k) = xv.dims2()?;
                let mut d = Tensor::zeros_like(xv);
                for (i, (&j, &gi)) in idx.iter().zip(g.data()).enumerate() {
                    d.data_mut()[i * k + j] += gi;
                }
                out.push((*x, d));
            }
            Op::Take(x, idx) => {
                let mut d = Tensor::zeros_like(val(*x));
                for (&j, &gi) in idx.iter().zip(g.data()) {
                    d.data_mut()[j] += gi;
                }
                out.push((*x, d));
            }
            Op::ExpandCols(x, cols) => {
                let d: Vec<f64> = g.data().chunks(*cols).map(|r| r.iter().sum()).collect();
                out.push((*x, Tensor::vector(d)));
            }
            Op::Reshape(x, _) => out.push((*x, g.reshape(val(*x).shape().to_vec())?)),
        }
        Ok(out)
    }
}

fn unary_deriv(kind: UnaryOp, x: f64, y: f64) -> f64 {
    match kind {
        UnaryOp::Neg => -1.0,
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::ClampMin(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryOp::Pow(p) => p * x.powf(p - 1.0),
        UnaryOp::Scale(c) => c,
        UnaryOp::Shift(_) => 1.0,
    }
}

/// Broadcasts the gradient of a reduction back over the reduced input.
fn spread_reduction(shape: &[usize], axis: Option<usize>, g: &Tensor, scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match (axis, shape.len()) {
        (None, _) | (Some(0), 1) => vec![g.data()[0] * scale; n],
        (Some(0), 2) => {
            let m = shape[1];
            (0..n).map(|i| g.data()[i % m] * scale).collect()
        }
        (Some(1), 2) => {
            let m = shape[1];
            (0..n).map(|i| g.data()[i / m] * scale).collect()
        }
        (Some(ax), r) => return Err(Error::InvalidAxis { axis: ax, rank: r }),
    };
    Tensor::new(shape.to_vec(), data)
}
