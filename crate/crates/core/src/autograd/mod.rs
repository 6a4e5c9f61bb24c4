//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only computation record. Every operation pushes a
//! node holding its forward value and whatever it needs to run backward, so the
//! node list is topologically ordered by construction. [`Var`] is a cheap
//! handle to a node.

mod kernels;
mod ops;

pub use ops::POOL_SCALES;


use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv1x1 { x: Var, w: Var },
    Conv3x3 { x: Var, w: Var },
    BiasAdd { x: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    SoftmaxRows(Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "reduce_sum",
            Op::Mean(_) => "reduce_mean",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose2d",
            Op::MatMul(..) => "matmul",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::BiasAdd { .. } => "bias_add",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv1x1 { x, w } | Op::Conv3x3 { x, w } => vec![x, w],
            Op::BiasAdd { x, b } => vec![x, b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a) => vec![a],
            Op::MaxPool { x, .. } | Op::Upsample { x, .. } | Op::InstanceNorm { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only computation record.
///
/// Confined to one thread; independent graphs share nothing.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Gradients are recorded for it only if `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().clone();
        self.push(shape, tensor.into_data(), requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Copy of `v` as a constant: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shape(n.shape.clone(), n.value.clone()).expect("node invariant: value matches shape")
    }

    /// Single element of a scalar node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v).map_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()], <[T]>::to_vec)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation tag of a node, e.g. `"matmul"`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Input handles of a node, in operand order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Seeds `root` with gradient one and accumulates (adds) gradients into
    /// every node on a path to it that requires them.
    ///
    /// Gradients persist across calls until [`Graph::zero_grad`], so calling
    /// this twice doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let numel = self.nodes[root.0].value.len();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        let mut adjoints: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(d_out) = adjoints[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &d_out, &mut adjoints);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&d_out).for_each(|(g, d)| *g += *d),
                None => node.grad = Some(d_out),
            }
        }
        Ok(())
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var(id)
    }

    fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}

/// Adds `delta` into the adjoint slot of `v`, allocating it on first touch.
fn accumulate<T: Scalar>(adjoints: &mut [Option<Vec<T>>], v: Var, len: usize, delta: impl FnOnce(&mut [T])) {
    let slot = adjoints[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    delta(slot);
}
