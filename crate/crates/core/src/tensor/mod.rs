//! Minimal f32 tensor library with reverse-mode autodiff.
//!
//! Tensors are immutable, reference-counted buffers. Every operation that
//! touches a gradient-tracked tensor records a node holding its inputs and a
//! backward closure; [`backward`] walks the recorded graph in reverse
//! creation order, which makes gradient accumulation order (and therefore
//! every f32 bit of a training run) deterministic.
//!
//! Backward closures are written in terms of the public ops, so running
//! [`backward`] with `create_graph = true` records a differentiable graph of
//! the gradient itself. That is what makes the R1 penalty trainable: the
//! discriminator update needs d/dtheta of |d D/d x|^2.

mod conv;
mod dwt;
mod ops;

#[cfg(test)]
mod tests;

pub mod nn;

pub(crate) use dwt::{dwt_chw, idwt_chw};

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() == 0)
}

/// Disables graph recording for the guard's lifetime (cheaper forward passes
/// for sampling, EMA evaluation, and detached computations).
pub struct NoGradGuard;

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
        NoGradGuard
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

type BackwardFn = dyn Fn(&Tensor, &[Tensor], &Tensor) -> Vec<Option<Tensor>>;

pub(crate) struct Node {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: Box<BackwardFn>,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                node: None,
            }),
        }
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn var(data: Vec<f32>, shape: &[usize]) -> Tensor {
        let t = Tensor::from_vec(data, shape);
        t.require_grad()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    /// New leaf view of the same data with `requires_grad` set. Used for
    /// parameters and for inputs whose gradient is wanted (R1 penalty).
    pub fn require_grad(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                node: None,
            }),
        }
    }

    /// Leaf copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.data.clone(), &self.inner.shape)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    pub fn has_nan(&self) -> bool {
        self.inner.data.iter().any(|v| !v.is_finite())
    }

    /// Constructs an op output, recording a backward node when gradient
    /// tracking is active and any input requires grad.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: &[usize],
        inputs: &[&Tensor],
        backward: impl Fn(&Tensor, &[Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "op output length mismatch for shape {:?}", shape);
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = if track {
            Some(Node {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: track,
                node,
            }),
        }
    }
}

/// Gradients keyed by tensor identity, as returned by [`backward`].
pub struct GradMap {
    grads: HashMap<u64, Tensor>,
}

impl GradMap {
    pub fn new() -> GradMap {
        GradMap { grads: HashMap::new() }
    }

    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    pub fn insert(&mut self, t: &Tensor, grad: Tensor) {
        self.grads.insert(t.id(), grad);
    }
}

impl Default for GradMap {
    fn default() -> Self {
        GradMap::new()
    }
}

/// Reverse-mode sweep from a scalar `root`.
///
/// With `create_graph` the computed gradients are themselves recorded on the
/// graph and can be differentiated again.
pub fn backward(root: &Tensor, create_graph: bool) -> GradMap {
    assert_eq!(root.numel(), 1, "backward() root must be a scalar");

    // Tensors with nodes reachable from the root, processed in reverse
    // creation order so every consumer is handled before its producer.
    let mut pending: BTreeMap<u64, Tensor> = BTreeMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if t.inner.node.is_some() && !pending.contains_key(&t.id()) {
            pending.insert(t.id(), t.clone());
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.inner.node.is_some() && !pending.contains_key(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::from_vec(vec![1.0], &[1]));

    let guard = if create_graph { None } else { Some(NoGradGuard::new()) };

    while let Some((&id, _)) = pending.iter().next_back() {
        let t = pending.remove(&id).unwrap();
        let Some(grad_out) = grads.get(&id).cloned() else {
            continue;
        };
        let node = t.inner.node.as_ref().unwrap();
        let input_grads = (node.backward)(&grad_out, &node.inputs, &t);
        assert_eq!(
            input_grads.len(),
            node.inputs.len(),
            "backward closure returned wrong arity"
        );
        for (input, g) in node.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            if !input.requires_grad() {
                continue;
            }
            assert_eq!(
                g.shape(),
                input.shape(),
                "gradient shape {:?} does not match input shape {:?}",
                g.shape(),
                input.shape()
            );
            match grads.remove(&input.id()) {
                Some(existing) => {
                    grads.insert(input.id(), existing.add(&g));
                }
                None => {
                    grads.insert(input.id(), g);
                }
            }
        }
    }
    drop(guard);

    GradMap { grads }
}
