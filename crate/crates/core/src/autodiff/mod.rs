//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every [`Var`] is a node on a [`Tape`]. Values are computed eagerly when the
//! node is recorded; [`Tape::backward`] walks the nodes once in reverse order.
//! Nodes whose ancestors contain no differentiable leaf are never visited.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, LeafReport};

pub(crate) use ops::{se_ard_cross, se_ard_gram, softplus, Op};

struct Node {
    op: Op,
    value: Rc<Matrix>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{} {}x{}", self.idx, v.rows(), v.cols())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn push(&self, op: Op, value: Matrix, requires_grad: bool) -> Var<'_> {
        self.push_rc(op, Rc::new(value), requires_grad)
    }

    fn push_rc(&self, op: Op, value: Rc<Matrix>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records `op` whose forward value has already been computed.
    pub(crate) fn record(&self, op: Op, value: Matrix) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(op, value, requires_grad)
    }

    fn value_of(&self, idx: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (r, c) = nodes[loss.idx].value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.idx + 1);
        adj.resize_with(loss.idx + 1, || None);
        adj[loss.idx] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let value_at = |j: usize| -> &Matrix { &nodes[j].value };
            let mut sink = |j: usize, contrib: Matrix| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            node.op.backward(&g, &node.value, &value_at, &mut sink);
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints of every differentiable node reached by a backward pass.
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.adj.get(v.idx).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of its shape when no path reached it.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.value().shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(self) -> Var<'t> {
        self.tape.push_rc(Op::Constant, self.value(), false)
    }
}

#[cfg(test)]
mod tests;
