//! A small reverse-mode autodiff engine over dense `f32` tensors.
//!
//! Tensors are immutable and reference counted; every op records its inputs
//! when gradient tracking is enabled and any input requires a gradient.
//! Backward rules are themselves written in terms of tensor ops, so
//! [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again (needed for the R1 penalty).

mod kernels;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use kernels::ConvGeom;
use ops::Op;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous gradient mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "shape {shape:?}");
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Wraps an op result, recording the op only when some input needs it.
    fn from_op(data: Vec<f32>, shape: Vec<usize>, op: Op) -> Self {
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if track {
            Self::build(data, shape, true, Some(op))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Self::build(data, shape.to_vec(), false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(data: Vec<f32>, shape: &[usize]) -> Self {
        let t = Self::from_vec(data, shape);
        t.requires_grad_()
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::from_vec(vec![v; shape.iter().product()], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self::from_vec(data, shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// A fresh leaf with the same values and gradient tracking enabled.
    pub fn requires_grad_(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// A fresh constant leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

/// Reverse-mode gradients of `output` (seeded with `seed`, or ones for a
/// scalar) with respect to each tensor in `wrt`. Tensors unreachable from
/// `output` receive zeros.
pub fn grad_with_seed(output: &Tensor, seed: Option<&Tensor>, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let _mode = set_grad_enabled(create_graph);
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    // Post-order over tracked nodes, remembering which ones lead to a target.
    let mut order: Vec<Tensor> = Vec::new();
    let mut needed: HashMap<u64, bool> = HashMap::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            let hit = targets.contains(&t.id())
                || t.0.op.as_ref().is_some_and(|op| {
                    op.inputs()
                        .iter()
                        .any(|i| needed.get(&i.id()).copied().unwrap_or(false))
                });
            needed.insert(t.id(), hit);
            order.push(t);
            continue;
        }
        if needed.contains_key(&t.id()) || !t.requires_grad() {
            continue;
        }
        // Placeholder so diamonds are not expanded twice.
        needed.insert(t.id(), false);
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for input in op.inputs() {
                if input.requires_grad() && !needed.contains_key(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if needed.get(&output.id()).copied().unwrap_or(false) {
        let seed = match seed {
            Some(s) => {
                assert_eq!(s.shape(), output.shape(), "seed shape must match output");
                s.clone()
            }
            None => {
                assert_eq!(output.numel(), 1, "implicit seed requires a scalar output");
                Tensor::ones(output.shape())
            }
        };
        grads.insert(output.id(), seed);
    }

    for node in order.iter().rev() {
        let Some(op) = &node.0.op else { continue };
        if !needed[&node.id()] {
            continue;
        }
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let inputs = op.inputs();
        let mask: Vec<bool> = inputs
            .iter()
            .map(|i| i.requires_grad() && needed.get(&i.id()).copied().unwrap_or(false))
            .collect();
        let input_grads = op.vjp(node, &g, &mask);
        for ((input, gi), keep) in inputs.iter().zip(input_grads).zip(mask) {
            if !keep {
                continue;
            }
            let Some(gi) = gi else { continue };
            debug_assert_eq!(gi.shape(), input.shape());
            let merged = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&gi),
                None => gi,
            };
            grads.insert(input.id(), merged);
        }
        if !targets.contains(&node.id()) {
            grads.remove(&node.id());
        }
    }

    wrt.iter()
        .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Gradients of a scalar `output` with respect to `wrt`.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    grad_with_seed(output, None, wrt, create_graph)
}
