//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tensor`] is a reference-counted node of a dynamically built graph.
//! Ops record a backward closure whenever any input requires a gradient and
//! gradient recording is enabled (see [`no_grad`]). Node ids are taken from a
//! global monotonic counter, so sorting reachable nodes by descending id is a
//! valid reverse topological order.

mod conv;
mod linalg;
mod loss;
mod norm;
mod ops;
pub mod scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use norm::RunningStats;
pub use scalar::{Dual, Real, Scalar};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn with_recording<R>(on: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(on)));
    f()
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(false, f)
}

/// Runs `f` with graph recording enabled, even inside [`no_grad`].
pub fn with_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(true, f)
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: `(grad_out, out_data, parents) -> grad per parent`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T: Scalar = f64>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf that accumulates a gradient.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("Tensor::param", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(vec![T::from_f64(value); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    /// Output of an op. Records `backward` only when some parent needs it.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(GradFn {
                    name,
                    parents,
                    backward,
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, for optimizers and running statistics.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.primal()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Same values as a fresh leaf that requires a gradient.
    pub fn detach_requiring_grad(&self) -> Self {
        Self::build(self.to_vec(), self.0.shape.clone(), true, None)
    }

    /// Converts element type, producing a leaf.
    pub fn cast<U: Scalar>(&self, requires_grad: bool, f: impl Fn(T) -> U) -> Tensor<U> {
        let data = self.0.data.borrow().iter().map(|&v| f(v)).collect();
        Tensor::build(data, self.0.shape.clone(), requires_grad, None)
    }

    /// Accumulates d(self)/d(leaf) into every reachable tensor that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that does not require grad".into(),
            ));
        }
        for (t, g) in self.propagate(vec![T::one()]) {
            t.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Gradients of this scalar w.r.t. `wrt`, without touching any stored
    /// `.grad`. Unreached tensors get zeros.
    pub fn grad_of(&self, wrt: &[&Tensor<T>]) -> Result<Vec<Vec<T>>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_of() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let mut by_id: HashMap<u64, Vec<T>> = if self.requires_grad() {
            self.propagate(vec![T::one()])
                .into_iter()
                .map(|(t, g)| (t.id(), g))
                .collect()
        } else {
            HashMap::new()
        };
        Ok(wrt
            .iter()
            .map(|t| by_id.remove(&t.id()).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect())
    }

    fn propagate(&self, seed: Vec<T>) -> Vec<(Tensor<T>, Vec<T>)> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().cloned());
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        let mut out = Vec::with_capacity(order.len());
        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(gf) = &t.0.grad_fn {
                let parent_grads = {
                    let data = t.0.data.borrow();
                    (gf.backward)(&g, &data, &gf.parents)
                };
                debug_assert_eq!(parent_grads.len(), gf.parents.len(), "op {}", gf.name);
                for (p, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "op {} grad length", gf.name);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            out.push((t, g));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = w.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let w = Tensor::<f64>::param(vec![0.3, -1.0, 2.5], &[3]).unwrap();
        w.sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_sum_gives_w() {
        let vals = vec![0.3, -1.0, 2.5, 4.0];
        let w = Tensor::<f64>::param(vals.clone(), &[4]).unwrap();
        w.square().sum().scale(0.5).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vals);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        w.sum().backward().unwrap();
        w.sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn shared_parent_accumulates() {
        let w = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        // w * w + w
        let y = w.mul(&w).unwrap().add(&w).unwrap();
        y.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn intermediate_grads_are_populated() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let h = w.scale(3.0);
        h.sum().backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let w = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| w.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn grad_of_leaves_stored_grads_alone() {
        let w = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
        let x = Tensor::<f64>::param(vec![0.5, 0.25], &[2]).unwrap();
        let y = w.mul(&x).unwrap().sum();
        let g = y.grad_of(&[&x]).unwrap();
        assert_eq!(g[0], vec![1.0, -2.0]);
        assert!(w.grad().is_none() && x.grad().is_none());
    }
}
