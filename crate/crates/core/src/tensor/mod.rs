//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! Every operation produces a new immutable [`Tensor`]. When any operand
//! requires a gradient, the result records the operation that produced it,
//! forming a computation graph that [`Tensor::backward`] walks in reverse
//! topological order. Feature maps use the `[channels, height, width]` layout.
//!
//! Only the gradient slot is mutable after construction, so parameters are
//! updated by replacing them with fresh leaves rather than writing in place.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod params;
mod pool;
mod serialize;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::{same_padding, Conv2dSpec};
pub use gradcheck::{
    check_gradient, finite_diff_grad, kink_signature, max_relative_error, relative_error,
    GradCheckReport,
};
pub use norm::{BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::Activation;
pub(crate) use pool::resample_plane;
pub use params::{BnState, ParamStore};
pub use serialize::{read_entries, write_entries, Entry, OPTIM_MAGIC, PARAM_MAGIC};
pub(crate) use serialize::{read_file, write_file};

use crate::error::{Error, Result};

/// A differentiable operation recorded in the graph.
///
/// `backward` receives the gradient of the loss with respect to the node's
/// output and returns one gradient per input, in the order of `inputs()`.
/// Inputs that do not require a gradient may receive `None`.
pub(crate) trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<&Tensor>;

    fn backward(&self, output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;

    /// Appends the discrete choices (activation masks, argmax routes) made
    /// during the forward pass. Used to detect finite-difference probes that
    /// straddle a kink.
    fn kinks(&self, _out: &mut Vec<u64>) {}
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Box<dyn Function>>,
    consumed: AtomicBool,
}

/// N-dimensional grid of `f64` values with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.op.as_ref().map(|op| op.name()).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<Box<dyn Function>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
            consumed: AtomicBool::new(false),
        }))
    }

    /// Wraps an operation result, recording `op` only when an input needs a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: impl Function + 'static) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        if requires_grad {
            Self::from_parts(shape, data, true, Some(Box::new(op)))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was not produced by a recorded operation.
    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Gradient accumulated by [`Tensor::backward`], if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape()
            ))),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Extents of a `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::contract(format!("expected a [C, H, W] tensor, got {s:?}"))),
        }
    }

    pub(crate) fn ptr(&self) -> *const () {
        Arc::as_ptr(&self.0) as *const ()
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar, summing gradients into every
    /// reachable tensor that requires one. A graph can be consumed once.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract("backward on a tensor that does not require grad"));
        }
        if self.0.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::contract("computation graph already consumed by backward"));
        }

        let order = topo_order(self);
        let mut pending: HashMap<*const (), Vec<f64>> = HashMap::new();
        pending.insert(self.ptr(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.ptr()) else {
                continue;
            };
            node.accumulate(&grad);
            let Some(op) = node.0.op.as_ref() else {
                continue;
            };
            let inputs = op.inputs();
            let grads = op.backward(&node.0.data, &grad);
            debug_assert_eq!(inputs.len(), grads.len(), "{} backward arity", op.name());
            for (input, g) in inputs.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.len(), "{} gradient length", op.name());
                match pending.get_mut(&input.ptr()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.ptr(), g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Nodes reachable from `root` through grad-requiring edges, inputs before outputs.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // Iterative post-order DFS; networks are deep enough to worry about recursion.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.0.op.as_ref() {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.ptr()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Calls `visit` on every recorded operation reachable from `root`.
pub(crate) fn walk_ops(root: &Tensor, mut visit: impl FnMut(&dyn Function)) {
    for node in topo_order(root) {
        if let Some(op) = node.0.op.as_ref() {
            visit(op.as_ref());
        }
    }
}
