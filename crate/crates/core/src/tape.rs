//! Reverse-mode gradient tape.
//!
//! Operations append nodes in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep. Each node holds
//! its forward value; whether it needs a gradient is inherited from its
//! inputs. Parameters enter the tape through [`Tape::param`], which memoizes
//! one leaf per [`ParamId`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{conv, elementwise, loss, pool, resize, roi_align, shape, softmax};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Conv2d(conv::Conv2dOp),
    MaxPool(pool::MaxPoolOp),
    Resize(resize::ResizeOp),
    Softmax(softmax::SoftmaxOp),
    Unary(elementwise::UnaryOp),
    Binary(elementwise::BinaryOp),
    Concat(shape::ConcatOp),
    Reduce(shape::ReduceOp),
    Reshape(Var),
    GatherRows(shape::GatherRowsOp),
    RoiAlign(roi_align::RoiAlignOp),
    Loss(loss::LossOp),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Conv2d(op) => {
                f(op.input);
                f(op.kernel);
                if let Some(b) = op.bias {
                    f(b);
                }
            }
            Op::MaxPool(op) => f(op.input),
            Op::Resize(op) => f(op.input),
            Op::Softmax(op) => f(op.input),
            Op::Unary(op) => f(op.input),
            Op::Binary(op) => {
                f(op.lhs);
                f(op.rhs);
            }
            Op::Concat(op) => op.inputs.iter().copied().for_each(f),
            Op::Reduce(op) => f(op.input),
            Op::Reshape(v) => f(*v),
            Op::GatherRows(op) => f(op.input),
            Op::RoiAlign(op) => f(op.input),
            Op::Loss(op) => f(op.input),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Write access to the gradient buffers of a backward sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// The gradient buffer for `v`, or `None` when `v` does not need one.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; the same id always maps to the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut requires_grad = false;
        op.for_each_input(|v| requires_grad |= self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                alloc::format!("loss must hold one value, got shape {}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d(op) => op.backward(nodes, &g, &mut sink),
                Op::MaxPool(op) => op.backward(&g, &mut sink),
                Op::Resize(op) => op.backward(nodes, &node.value, &g, &mut sink),
                Op::Softmax(op) => op.backward(&node.value, &g, &mut sink),
                Op::Unary(op) => op.backward(nodes, &node.value, &g, &mut sink),
                Op::Binary(op) => op.backward(nodes, &g, &mut sink),
                Op::Concat(op) => op.backward(nodes, &g, &mut sink),
                Op::Reduce(op) => op.backward(nodes, &g, &mut sink),
                Op::Reshape(v) => {
                    if let Some(slot) = sink.slot(*v) {
                        slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                }
                Op::GatherRows(op) => op.backward(nodes, &g, &mut sink),
                Op::RoiAlign(op) => op.backward(nodes, &g, &mut sink),
                Op::Loss(op) => op.backward(nodes, &g, &mut sink),
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl ParamStore {
    /// Adds the tape's parameter gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, v) in tape.param_vars() {
            if let Some(g) = grads.wrt(v) {
                let p = self.get_mut(id);
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}
