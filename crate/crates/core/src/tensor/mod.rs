//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a cheaply clonable handle onto an immutable value plus an
//! optional backreference into the computation graph. Graph edges are the
//! `Op` stored in each non-leaf node; [`Tensor::backward`] replays them in
//! reverse topological order (see [`autograd::Tape`]).

mod autograd;
pub(crate) mod kernels;
mod ops;

pub use autograd::Tape;
pub use ops::NormP;

/// Output extent of a valid convolution configuration, or a configuration
/// error when the stride does not divide evenly.
pub fn conv_output_extent(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    ops::conv_out_size(h, w, kh, kw, stride, pad)
}

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, no operation on this thread records graph structure.
/// Used for evaluation passes and for frozen sub-networks.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|f| f.replace(true));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        NO_GRAD.with(|f| f.set(prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|f| !f.get())
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Op<T>,
}

/// Dense N-dimensional tensor, the carrier of all values in the crate.
///
/// Cloning is a reference-count bump; the underlying buffer is shared.
/// Data is immutable during graph construction; the optimizer and batchnorm
/// running statistics mutate leaf buffers between steps via [`Tensor::set_data`].
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                op,
            }),
        }
    }

    /// Constant leaf tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            shape_err!("zero dimension in shape {shape:?}");
        }
        if data.len() != numel {
            shape_err!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            );
        }
        Ok(Self::from_op(data, shape.to_vec(), Op::Leaf))
    }

    /// Leaf tensor participating in gradient computation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_op(vec![T::zero(); numel], shape.to_vec(), Op::Leaf)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_op(vec![T::one(); numel], shape.to_vec(), Op::Leaf)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::from_op(vec![v; numel], shape.to_vec(), Op::Leaf)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_op(vec![v], vec![1], Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Borrow of the underlying buffer.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor. Panics on anything else; losses are
    /// validated scalar by construction.
    pub fn item(&self) -> T {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() requires a single-element tensor");
        data[0]
    }

    /// Replace the buffer of a leaf tensor (optimizer updates, running stats).
    pub fn set_data(&self, new: Vec<T>) {
        assert_eq!(new.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = new;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip gradient participation of a leaf (network freezing).
    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    /// True when this node is part of a differentiable graph: an op node, or
    /// a leaf currently requiring gradients.
    pub(crate) fn tracks(&self) -> bool {
        match self.inner.op {
            Op::Leaf => self.inner.requires_grad.get(),
            _ => true,
        }
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of this tensor severed from the graph. Never records gradients.
    pub fn detach(&self) -> Tensor<T> {
        Self::from_op(self.to_vec(), self.inner.shape.to_vec(), Op::Leaf)
    }

    /// All entries finite (neither NaN nor infinite).
    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            shape_err!(
                "{what}: operands have shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            );
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn detach_is_constant() {
        let p = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = p.detach();
        assert!(!d.requires_grad());
        assert!(d.is_leaf());
        assert_eq!(d.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn no_grad_guard_restores() {
        assert!(grad_enabled());
        {
            let _g = NoGradGuard::new();
            assert!(!grad_enabled());
            {
                let _h = NoGradGuard::new();
                assert!(!grad_enabled());
            }
            assert!(!grad_enabled());
        }
        assert!(grad_enabled());
    }
}
