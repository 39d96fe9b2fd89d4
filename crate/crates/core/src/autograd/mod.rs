//! Minimal reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! Every [`Var`] owns its forward value and, when any input requires a
//! gradient, the closure that maps the output gradient back onto its parents.
//! Node ids grow monotonically, so sorting reachable nodes by descending id is
//! a valid reverse topological order.
//!
//! The engine is generic over [`Element`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod conv;
mod linalg;
mod norm;
mod ops;
mod resample;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

pub use conv::{conv3d, ConvGeometry};
pub use linalg::{linear, matmul};
pub use norm::{batch_norm, layer_norm, BatchNormStats};
pub use ops::{concat, cross_entropy, softmax_last};
pub use resample::{adaptive_avg_pool_axis, linear_resize_axis, AxisMap};

/// Scalar types the engine can differentiate through.
pub trait Element:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn cast<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[Var<T>], &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Element> {
    id: u64,
    value: ArrayD<T>,
    requires_grad: bool,
    retain: Cell<bool>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor value participating in a differentiable computation.
#[derive(Clone)]
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Var<T> {
    fn new_node(
        value: ArrayD<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            retain: Cell::new(false),
            parents,
            backward,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: ArrayD<T>) -> Self {
        Self::new_node(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: ArrayD<T>) -> Self {
        Self::new_node(value, true, Vec::new(), None)
    }

    /// Records an operation. The backward closure is dropped (and the parents
    /// released) when no parent requires a gradient.
    pub(crate) fn from_op<F>(value: ArrayD<T>, parents: Vec<Var<T>>, backward: F) -> Self
    where
        F: Fn(&ArrayD<T>, &[Var<T>], &ArrayD<T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        if parents.iter().any(Var::requires_grad) {
            Self::new_node(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Keep this intermediate's gradient in the result of [`Var::backward`].
    pub fn retain_grad(&self) {
        self.0.retain.set(true);
    }

    /// Backpropagates from this value, seeding with ones.
    pub fn backward(&self) -> Gradients<T> {
        self.backward_with(ArrayD::from_elem(self.shape(), T::one()))
    }

    /// Backpropagates with an explicit output gradient.
    pub fn backward_with(&self, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape must match output");
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<u64, ArrayD<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        let mut kept = HashMap::new();
        for v in order {
            let Some(grad) = pending.remove(&v.id()) else {
                continue;
            };
            if let Some(backward) = &v.0.backward {
                let parent_grads = backward(&grad, &v.0.parents, &v.0.value);
                for (parent, pg) in v.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), parent.shape());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => *acc += &pg,
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            if v.0.backward.is_none() || v.0.retain.get() {
                kept.insert(v.id(), grad);
            }
        }
        Gradients { grads: kept }
    }
}

/// Gradients of leaves (and retained intermediates) after a backward pass.
#[derive(Default)]
pub struct Gradients<T> {
    grads: HashMap<u64, ArrayD<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&ArrayD<T>> {
        self.grads.get(&var.id())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> ArrayD<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(var.shape())))
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<T: Element>(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(ndarray::Axis(axis)).insert_axis(ndarray::Axis(axis));
        }
    }
    g
}
