//! Tape-recorded reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and input ids to a
//! [`Tape`]. [`Tape::grad`] walks the tape backwards and returns plain tensors.
//! [`Tape::grad_graph`] runs the same walk but leaves every adjoint on the
//! tape as ordinary nodes, so the returned gradients can be differentiated
//! again (gradient of a gradient).
//!
//! Adjoint rules are written with the same primitives the forward pass uses;
//! there are no opaque backward kernels. Nodes whose local derivative is
//! piecewise constant (`relu`, `abs`) feed that derivative back as a constant,
//! which is exact almost everywhere.

mod backward;
pub mod gradcheck;
mod ops;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::{cross_entropy_softmax, row_concat};

/// Identifier of a node on a tape.
pub type NodeId = usize;

/// Operation recorded on a tape node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    ScaleBy,
    MatMul,
    Transpose,
    Reshape,
    RowConcat,
    RowSlice,
    Sum,
    RowSoftmax,
    Relu,
    Gelu,
    GeluDeriv,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
    Abs,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(S),
    ScaleBy,
    MatMul,
    Transpose,
    Reshape,
    RowConcat,
    RowSlice { start: usize, end: usize },
    Sum,
    RowSoftmax,
    Relu,
    Gelu,
    GeluDeriv,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
    Abs,
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::ScaleBy => OpKind::ScaleBy,
            Op::MatMul => OpKind::MatMul,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape => OpKind::Reshape,
            Op::RowConcat => OpKind::RowConcat,
            Op::RowSlice { .. } => OpKind::RowSlice,
            Op::Sum => OpKind::Sum,
            Op::RowSoftmax => OpKind::RowSoftmax,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::GeluDeriv => OpKind::GeluDeriv,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Sqrt => OpKind::Sqrt,
            Op::Square => OpKind::Square,
            Op::Recip => OpKind::Recip,
            Op::Abs => OpKind::Abs,
        }
    }
}

pub(crate) struct Node<S> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
}

/// Recorded computation graph. Confined to one thread; build one per run.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input (model parameter or attacker-controlled input).
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(Op::Leaf, Vec::new(), value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(Op::Constant, Vec::new(), value)
    }

    pub fn op_kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes.borrow().get(id).map(|n| n.op.kind())
    }

    pub fn inputs(&self, id: NodeId) -> Option<Vec<NodeId>> {
        self.nodes.borrow().get(id).map(|n| n.inputs.clone())
    }

    pub fn value(&self, id: NodeId) -> Option<Tensor<S>> {
        self.nodes.borrow().get(id).map(|n| n.value.clone())
    }

    fn push_unchecked(&self, op: Op<S>, inputs: Vec<NodeId>, value: Tensor<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs, value });
        Var { tape: self, id }
    }

    fn push(
        &self,
        name: &'static str,
        op: Op<S>,
        inputs: Vec<NodeId>,
        value: Tensor<S>,
    ) -> Result<Var<'_, S>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, inputs, value))
    }

    fn check(&self, v: Var<'_, S>) -> Result<()> {
        if !std::ptr::eq(v.tape, self) || v.id >= self.len() {
            return Err(Error::UnknownNode(v.id));
        }
        Ok(())
    }

    fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// Runs `f` against the stored values of `ids`.
    fn with_values<R>(&self, ids: &[NodeId], f: impl FnOnce(&[&Tensor<S>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<S>> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }
}

#[cfg(test)]
mod tests;
