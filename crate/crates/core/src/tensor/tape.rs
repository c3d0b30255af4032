//! Reverse-mode differentiation over whole matrices.
//!
//! Every operation appends a node holding its forward value. A node is
//! tracked when it is a trainable leaf or depends on one; constants and
//! everything computed purely from constants are skipped by `backward`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a per-sample loss is folded into a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
        reduction: Reduction,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

/// Exact derivative of [`gelu`].
pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when no path exists.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push_raw(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        Ok(self.push_raw(op, value, tracked))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Hadamard(a, b), v, &[a, b])
    }

    /// `x + b` with the column vector `b` broadcast across the columns of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_column_broadcast(self.value(bias))?;
        self.push(Op::AddBias(x, bias), v, &[x, bias])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    /// Cross-entropy of softmax over each column of `logits` (classes x batch).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize], reduction: Reduction) -> Result<NodeId> {
        let z = self.value(logits);
        let (classes, batch) = z.shape();
        if labels.len() != batch {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if batch == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Matrix::zeros(classes, batch);
        let mut total = 0.0;
        for (c, &label) in labels.iter().enumerate() {
            let max = (0..classes).map(|r| z.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for r in 0..classes {
                let e = (z.get(r, c) - max).exp();
                probs.set(r, c, e);
                denom += e;
            }
            for r in 0..classes {
                probs.set(r, c, probs.get(r, c) / denom);
            }
            total += denom.ln() + max - z.get(label, c);
        }
        if reduction == Reduction::Mean {
            total /= batch as f64;
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            reduction,
        };
        self.push(op, Matrix::filled(1, 1, total), &[logits])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.is_tracked(*a) {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.is_tracked(*b) {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *a, || g.clone())?;
                    self.pass(&mut grads, *b, || g.clone())?;
                    grads[idx] = Some(g);
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *a, || g.clone())?;
                    self.pass(&mut grads, *b, || g.scale(-1.0))?;
                    grads[idx] = Some(g);
                }
                Op::Hadamard(a, b) => {
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a))?)?;
                    }
                    grads[idx] = Some(g);
                }
                Op::AddBias(x, b) => {
                    self.pass(&mut grads, *x, || g.clone())?;
                    self.pass(&mut grads, *b, || Matrix::column(&g.row_sums()))?;
                    grads[idx] = Some(g);
                }
                Op::Scale(a, f) => {
                    self.pass(&mut grads, *a, || g.scale(*f))?;
                    grads[idx] = Some(g);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.pass(&mut grads, *a, || {
                        g.zip_map(x, "relu'", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                            .expect("shapes checked in forward")
                    })?;
                    grads[idx] = Some(g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    self.pass(&mut grads, *a, || {
                        g.zip_map(x, "gelu'", |gv, xv| gv * gelu_derivative(xv))
                            .expect("shapes checked in forward")
                    })?;
                    grads[idx] = Some(g);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    self.pass(&mut grads, *a, || {
                        g.zip_map(x, "square'", |gv, xv| 2.0 * gv * xv)
                            .expect("shapes checked in forward")
                    })?;
                    grads[idx] = Some(g);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.get(0, 0);
                    self.pass(&mut grads, *a, || Matrix::filled(r, c, s))?;
                    grads[idx] = Some(g);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    let mut scale = g.get(0, 0);
                    if *reduction == Reduction::Mean {
                        scale /= labels.len() as f64;
                    }
                    self.pass(&mut grads, *logits, || {
                        let mut d = probs.clone();
                        for (c, &l) in labels.iter().enumerate() {
                            d.set(l, c, d.get(l, c) - 1.0);
                        }
                        d.scale(scale)
                    })?;
                    grads[idx] = Some(g);
                }
            }
        }

        // Only leaves keep their gradients; intermediates are dropped.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn pass(&self, grads: &mut [Option<Matrix>], target: NodeId, grad: impl FnOnce() -> Matrix) -> Result<()> {
        if self.is_tracked(target) {
            accumulate(grads, target, grad())?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::Square(_) => "square",
        Op::Sum(_) => "sum",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}
