//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every op allocates a fresh output tensor
//! holding a backward closure over its parents, and dropping the loss
//! tensor frees the whole graph. Tensors are confined to one thread
//! (`Rc` storage); data-parallel evaluation happens over clips, never
//! over a shared graph.

mod conv;
mod gradcheck;
mod linalg;
mod ops;
mod rng;
mod store;

pub use gradcheck::grad_check;
pub use rng::RngStream;
pub use store::ParameterStore;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::{Result, VvError};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while ops should record backward closures.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` without recording the computation graph (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Gradient contributions for each parent, aligned with `BackwardOp::parents`.
/// `None` marks a parent that does not require a gradient.
type ParentGrads = Vec<Option<Vec<f32>>>;

struct BackwardOp {
    parents: Vec<Tensor>,
    apply: Box<dyn Fn(&[f32]) -> ParentGrads>,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    op: Option<BackwardOp>,
}

/// Dense n-dimensional f32 array, row-major, optionally tracked by the
/// reverse-mode graph. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<BackwardOp>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant (untracked) tensor from raw data.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(VvError::Dimension(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor (participates in backward).
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(VvError::Dimension(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_inner(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new_inner(vec![value; n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::new_inner(vec![value], vec![1], false, None)
    }

    /// Output of an op. Grad tracking is dropped when recording is disabled
    /// or no parent requires it.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        apply: impl Fn(&[f32]) -> ParentGrads + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = track.then(|| BackwardOp {
            parents,
            apply: Box::new(apply),
        });
        Self::new_inner(data, shape, track, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; contract error on non-scalar tensors.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(VvError::Contract(format!(
                "item() requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data update (optimizer use). The graph this tensor fed is
    /// assumed to be already consumed.
    pub(crate) fn set_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Untracked copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Self::new_inner(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    /// Reverse-mode backprop from a scalar loss. Gradients accumulate into
    /// every reachable `requires_grad` tensor; repeated uses of a tensor
    /// in the graph sum their contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(VvError::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(VvError::Contract(
                "backward() on a tensor with no gradient path".into(),
            ));
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in &order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(VvError::Numerical(format!(
                    "non-finite gradient for tensor of shape {:?}",
                    node.shape()
                )));
            }
            {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(op) = &node.inner.op {
                for (parent, contrib) in op.parents.iter().zip((op.apply)(&g)) {
                    let Some(contrib) = contrib else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), parent.numel());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&contrib) {
                                *a += b;
                            }
                        }
                        None => {
                            pending.insert(parent.id(), contrib);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reverse post-order over the grad-requiring subgraph: every node appears
/// before all of its parents.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((node, idx)) = stack.pop() {
        let n_parents = node.inner.op.as_ref().map_or(0, |o| o.parents.len());
        if idx < n_parents {
            stack.push((node.clone(), idx + 1));
            let parent = node.inner.op.as_ref().unwrap().parents[idx].clone();
            if parent.requires_grad() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order.reverse();
    order
}
