//! Dense float64 tensors with reverse-mode differentiation.
//!
//! Every operation that sees a tracked input records a backward closure on
//! the node it produces; [`backward`] replays those closures in reverse
//! topological order and accumulates gradients into the leaf tensors that
//! were created with `requires_grad`. Interior nodes never keep gradients,
//! so calling [`backward`] twice on the same graph adds the same leaf
//! gradients twice.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    let id = NEXT_ID.get();
    NEXT_ID.set(id + 1);
    id
}

/// Returns true when operations record backward closures.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.get()
}

/// Disables gradient recording until the guard is dropped.
///
/// Inference and finite-difference probing run under this guard so that
/// forward passes stay pure value computation.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.get();
    GRAD_ENABLED.set(false);
    NoGradGuard { prev }
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.set(self.prev);
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

pub(crate) struct TensorData {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    /// Tracked inputs of the op that produced this node (empty for leaves).
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward_fn: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorData>>,
    id: u64,
}

impl Tensor {
    /// Builds a leaf tensor. Panics unless `product(shape) == values.len()`.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape: shape.to_vec(),
                values,
                requires_grad: false,
                grad: None,
                parents: Vec::new(),
                backward_fn: None,
            })),
            id: next_id(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value])
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Tensor {
        Tensor::new(shape, values.iter().map(|&v| v as f64).collect())
    }

    pub(crate) fn interior(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, values.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                requires_grad: false,
                grad: None,
                parents,
                backward_fn: Some(backward_fn),
            })),
            id: next_id(),
        }
    }

    /// Marks a leaf as a differentiation target. Panics on interior nodes.
    pub fn requires_grad(self, flag: bool) -> Tensor {
        {
            let mut d = self.inner.borrow_mut();
            assert!(
                d.backward_fn.is_none(),
                "requires_grad can only be set on leaf tensors"
            );
            d.requires_grad = flag;
        }
        self
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().backward_fn.is_none()
    }

    /// Participates in gradient flow, either as a marked leaf or as a
    /// recorded interior node.
    pub(crate) fn tracked(&self) -> bool {
        let d = self.inner.borrow();
        d.requires_grad || d.backward_fn.is_some()
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Reads the values without cloning.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar shape {:?}", d.shape);
        d.values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the values of a leaf tensor in place (optimizer updates,
    /// finite-difference probing). Panics on interior nodes or length
    /// mismatch.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert!(d.backward_fn.is_none(), "set_values on non-leaf tensor");
        assert_eq!(d.values.len(), values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    /// In-place elementwise update of a leaf tensor.
    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.inner.borrow_mut();
        debug_assert!(d.backward_fn.is_none(), "update_values on non-leaf tensor");
        f(&mut d.values);
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Accumulates `loss` gradients into every reachable `requires_grad`
    /// leaf. `loss` must be scalar.
    pub fn backward(&self) {
        backward(self);
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("tracked", &(d.requires_grad || d.backward_fn.is_some()))
            .finish()
    }
}

/// Per-node gradient flow used while replaying the tape. Keyed by node id;
/// lives only for the duration of one [`backward`] call.
#[derive(Default)]
pub struct GradStore {
    slots: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    /// Adds a contribution to a node's flow gradient, skipping untracked
    /// tensors.
    pub(crate) fn accumulate(&mut self, target: &Tensor, delta: &[f64]) {
        if !target.tracked() {
            return;
        }
        let slot = self
            .slots
            .entry(target.id())
            .or_insert_with(|| vec![0.0; delta.len()]);
        debug_assert_eq!(slot.len(), delta.len());
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    /// Borrows (creating if absent) the flow slot for in-place accumulation.
    pub(crate) fn slot_mut(&mut self, target: &Tensor, len: usize) -> Option<&mut [f64]> {
        if !target.tracked() {
            return None;
        }
        Some(
            self.slots
                .entry(target.id())
                .or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn take(&mut self, id: u64) -> Option<Vec<f64>> {
        self.slots.remove(&id)
    }
}

/// Reverse-mode sweep from a scalar loss.
pub fn backward(loss: &Tensor) {
    assert_eq!(
        loss.numel(),
        1,
        "backward requires a scalar loss, got shape {:?}",
        loss.shape()
    );

    let order = topo_order(loss);
    let mut store = GradStore::default();
    store.slots.insert(loss.id(), vec![1.0]);

    // `order` lists parents before children; walk it backwards so every
    // node's flow gradient is complete before it propagates further.
    for node in order.iter().rev() {
        let flow = match store.take(node.id()) {
            Some(f) => f,
            None => continue,
        };
        {
            let mut d = node.inner.borrow_mut();
            if d.requires_grad {
                match &mut d.grad {
                    Some(g) => {
                        for (gi, fi) in g.iter_mut().zip(&flow) {
                            *gi += fi;
                        }
                    }
                    None => d.grad = Some(flow.clone()),
                }
            }
        }
        // Clone the closure handle out so the node is not borrowed while
        // the closure borrows its parents.
        let backward_fn = {
            let d = node.inner.borrow();
            d.backward_fn.as_ref().map(|_| node.clone())
        };
        if let Some(holder) = backward_fn {
            let d = holder.inner.borrow();
            if let Some(f) = d.backward_fn.as_ref() {
                f(&flow, &mut store);
            }
        }
    }
}

/// Iterative DFS post-order over the tracked graph: parents come before the
/// nodes that consume them.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        let d = node.inner.borrow();
        for parent in &d.parents {
            if !visited.contains(&parent.id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}
