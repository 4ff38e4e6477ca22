//! Graph nodes, gradient mode and the reverse sweep.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArcArray, ArrayD, IxDyn};

/// Shared, immutable n-d storage used by every node.
pub type Data = ArcArray<f64, IxDyn>;

type BackwardFn = dyn Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>;

pub(crate) struct Op {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: Box<BackwardFn>,
}

struct Node {
    id: u64,
    value: Data,
    requires_grad: bool,
    op: Option<Op>,
}

/// A node in the computation graph.
///
/// Cloning is cheap (reference counted). Values are never mutated in place;
/// parameter updates swap in a fresh leaf.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations currently record the graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Run `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

impl Tensor {
    /// A constant (never receives gradient).
    pub fn constant(value: impl Into<Data>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf; when `requires_grad` it can be differentiated against.
    pub fn leaf(value: impl Into<Data>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: value.into(),
            requires_grad,
            op: None,
        }))
    }

    pub fn from_vec(shape: &[usize], v: Vec<f64>) -> Self {
        let a = ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape/data length mismatch");
        Self::constant(a)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(ArrayD::ones(IxDyn(shape)))
    }

    /// Builds an op node. Records the graph only when grad mode is on and at
    /// least one input requires grad.
    pub(crate) fn from_op(
        value: ArrayD<f64>,
        name: &'static str,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::constant(value);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            value: value.into_shared(),
            requires_grad: true,
            op: Some(Op {
                name,
                inputs,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn value(&self) -> &Data {
        &self.0.value
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.0.value.to_owned()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// Same value as a fresh differentiable leaf.
    pub fn detach_leaf(&self) -> Tensor {
        Tensor::leaf(self.0.value.clone(), true)
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Walks the recorded graph and reports whether `other` is an ancestor.
    pub fn depends_on(&self, other: &Tensor) -> bool {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if t.id() == other.id() {
                return true;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                stack.extend(op.inputs.iter().cloned());
            }
        }
        false
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .finish()
    }
}

/// Reverse-mode gradients of `output` (summed if not scalar) with respect to
/// each tensor in `wrt`. Tensors the output does not depend on get zeros.
///
/// With `create_graph` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Vec<Tensor> {
    let _guard = GradModeGuard::new(create_graph);
    let order = topo_order(output);
    let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Tensor::ones(output.shape()));
    }
    let mut kept: HashMap<u64, Tensor> = HashMap::new();

    for node in order.iter().rev() {
        let g = match grads.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        if wanted.contains(&node.id()) {
            kept.insert(node.id(), g.clone());
        }
        let op = match node.op() {
            Some(op) => op,
            None => continue,
        };
        let input_grads = (op.backward)(&op.inputs, node, &g);
        debug_assert_eq!(input_grads.len(), op.inputs.len(), "op {}", op.name);
        for (input, ig) in op.inputs.iter().zip(input_grads) {
            let ig = match ig {
                Some(ig) if input.requires_grad() => ig,
                _ => continue,
            };
            debug_assert_eq!(ig.shape(), input.shape(), "grad shape from op {}", op.name);
            match grads.remove(&input.id()) {
                Some(acc) => {
                    grads.insert(input.id(), acc.add(&ig));
                }
                None => {
                    grads.insert(input.id(), ig);
                }
            }
        }
    }

    wrt.iter()
        .map(|t| {
            kept.remove(&t.id())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Post-order over differentiable nodes reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    if !root.requires_grad() {
        return order;
    }
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, child)) = stack.pop() {
        let inputs = node.op().map(|o| o.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((node, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_mode_guards_nest_and_restore() {
        assert!(grad_enabled());
        no_grad(|| {
            assert!(!grad_enabled());
            let _on = GradModeGuard::new(true);
            assert!(grad_enabled());
        });
        assert!(grad_enabled());
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0), true);
        let y = x.square();
        assert!(y.depends_on(&x));
        assert!(!y.detach().depends_on(&x));
        assert!(!y.detach().requires_grad());
    }
}
