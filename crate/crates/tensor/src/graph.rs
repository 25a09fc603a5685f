use crate::error::{invalid, Result, TensorError};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, mode: BatchNormMode },
    AvgPool { x: Var, kernel: usize, stride: usize },
    GlobalAvg(Var),
    ChannelMean(Var),
    /// Max-style selections and gathers; the gradient routes to the recorded
    /// source offsets.
    Select { x: Var, source: Vec<usize> },
    LogSoftmax(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A single-owner differentiation tape. Every op appends a node; calling
/// [`Graph::backward`] walks the nodes in reverse.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), strict: false }
    }

    /// In strict mode every op output is checked for NaN/inf.
    pub fn strict() -> Self {
        Self { nodes: Vec::new(), strict: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether `v` is a leaf (parameter or constant) rather than an op output.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        let requires_grad = op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        if self.strict && !value.is_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(invalid!("backward needs a scalar output, got shape {:?}", out.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = ops::backward(self, node, &g)?;
            grads[i] = Some(g);
            for (parent, contribution) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contribution.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Grads { grads })
    }
}

pub(crate) fn op_parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Sqrt(x)
        | Op::ClampMin(x, _)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SumAxis(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::GlobalAvg(x)
        | Op::ChannelMean(x)
        | Op::LogSoftmax(x) => vec![*x],
        Op::AvgPool { x, .. } | Op::Select { x, .. } => vec![*x],
        Op::Concat(xs, _) => xs.clone(),
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// The gradient of the swept output w.r.t. `v`, if `v` took part.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
