//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tracked tensors record an [`Op`](ops::Op) node holding their inputs and
//! whatever the backward rule needs; [`Tensor::gradients`] walks that graph
//! once in reverse topological order.

pub mod checkpoint;
pub mod gemm;
pub mod gradcheck;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

use ops::Op;
pub use ops::{OpKind, ReduceKind};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Op>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim("tensor", format!("shape {shape:?} holds {n} values, data has {len}")));
    }
    Ok(())
}

impl Tensor {
    /// Untracked tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::raw(shape.to_vec(), data, false, None))
    }

    /// Tracked leaf; gradients flow into it.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::raw(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(Vec::new(), vec![value], false, None)
    }

    /// A fresh leaf with the same values, tracked or not.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::raw(self.shape().to_vec(), self.data().to_vec(), requires_grad, None)
    }

    pub fn detach(&self) -> Tensor {
        self.detach_with_grad(false)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Op>) -> Tensor {
        Tensor { inner: Arc::new(Inner { id: next_id(), shape, data, requires_grad, grad: Mutex::new(None), node }) }
    }

    /// Result of an operation. Tracked iff any input is tracked; untracked
    /// results drop the node so no graph is retained.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = op.inputs().iter().any(|t| t.requires_grad());
        if tracked {
            Tensor::raw(shape, data, true, Some(op))
        } else {
            Tensor::raw(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Kind of the op that produced this tensor, `None` for leaves.
    pub fn op_kind(&self) -> Option<OpKind> {
        self.inner.node.as_ref().map(Op::kind)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Add `g` into this tensor's accumulated gradient.
    pub fn accumulate_grad(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient length {} for shape {:?}", g.len(), self.shape()),
            ));
        }
        let mut slot = self.inner.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Backpropagate from a scalar loss and add the results into every
    /// tracked leaf's `grad`. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        let grads = self.gradients()?;
        for (leaf, g) in grads.leaves.into_values() {
            leaf.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Gradients of a scalar loss with respect to every tracked leaf,
    /// without touching the leaves' stored `grad`.
    pub fn gradients(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("backward on an untracked tensor".into()));
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    leaves.insert(t.id(), (t.clone(), g));
                }
                Some(op) => {
                    for (input, contrib) in op.backward(t, &g) {
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), contrib);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }

    // Post-order over tracked nodes; reversed, it visits every node after
    // all of its consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.node {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_kind())
            .field("data", &preview)
            .finish()
    }
}

/// Leaf gradients from one backward pass, keyed by tensor identity.
pub struct Gradients {
    leaves: HashMap<u64, (Tensor, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.leaves.get(&t.id()).map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Split `shape` around `axis` into (outer, len, inner) element counts.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis { op, axis, rank: shape.len() });
    }
    Ok(())
}
