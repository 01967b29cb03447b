//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every training step builds a fresh [`Tape`]. Leaves are created with
//! [`Tape::leaf`]; each operation records its output value plus a backward
//! closure that routes the incoming gradient to the operation's parents.
//! [`Tape::backward`] walks the tape in reverse topological order (which is
//! simply reverse creation order) and accumulates gradients; tensors used by
//! several consumers receive the sum of all path gradients.
//!
//! A `Tape` is single-owner: one training step, one thread of control.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tape, &Tensor, &mut [Option<Tensor>])>;

struct BackOp {
    run: BackwardFn,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    back: Option<BackOp>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Install `value` as a leaf. Only leaves with `requires_grad` receive
    /// gradient buffers after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a fresh constant leaf: gradients do not flow
    /// past a detach point.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Record an op output. `parents_require_grad` is precomputed by the op
    /// from its inputs; when false the backward closure is dropped and the
    /// node is a constant.
    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents_require_grad: bool,
        back: BackwardFn,
    ) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite values produced by op `{op}` (shape {:?})",
            value.shape()
        );
        let back = parents_require_grad.then(|| BackOp { run: back });
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: parents_require_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Add a gradient contribution for node `id`, respecting its
    /// `requires_grad` flag. The closure receives the (zero-initialized or
    /// previously accumulated) buffer and adds into it.
    pub(crate) fn accum_grad(
        &self,
        grads: &mut [Option<Tensor>],
        id: usize,
        add: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
        add(buf.data_mut());
    }

    /// Reverse pass from a scalar loss. Gradient buffers are installed on
    /// every reachable node with `requires_grad`; the gradient of the loss
    /// with respect to itself is 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(op) = &self.nodes[id].back {
                (op.run)(self, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}
