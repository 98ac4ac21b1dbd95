//! Rank-N f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: data never changes after
//! construction, the only interior mutability is gradient accumulation.
//! Operations that see at least one tracked operand record themselves on
//! the implicit graph (parent links plus a backward closure); [`Tape`]
//! linearizes that graph and replays it in reverse.
//!
//! Conventions fixed across the crate: row-major layout, cross-correlation
//! convolutions, f32 storage with f64 accumulation inside reductions.

pub mod autograd;
pub mod io;
pub mod kernels;
mod ops;

pub use autograd::{backward, Tape};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn = Box<dyn Fn(&TensorInner)>;

pub(crate) struct TensorInner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) grad: RefCell<Option<Vec<f32>>>,
    /// Gradients flow into this tensor (leaf marked requires_grad, or any
    /// tensor derived from one).
    pub(crate) tracked: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Shared handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!("zero extent in shape {shape:?}")));
    }
    if numel != len {
        return Err(Error::dim(format!(
            "shape {shape:?} expects {numel} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, tracked: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                tracked,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn node(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                tracked: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    /// Untracked constant from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(shape.to_vec(), data, false))
    }

    /// Trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; shape.iter().product()], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![1], vec![value], false)
    }

    /// Re-create this tensor as a tracked leaf (same data, fresh identity).
    pub fn tracked_leaf(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// Untracked copy of this tensor's value (cuts the graph).
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.inner.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f32>>> {
        let r = self.inner.grad.borrow();
        if r.is_some() {
            Some(Ref::map(r, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Gradient buffer, zero-initialized on first touch.
    pub(crate) fn grad_buf(&self) -> RefMut<'_, Vec<f32>> {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.len()]);
        }
        RefMut::map(g, |o| o.as_mut().unwrap())
    }

    /// Elementwise add `delta` into this tensor's gradient.
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut buf = self.grad_buf();
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.inner.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Internal(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    /// Flat offset for a multi-index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds at axis {i}");
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.inner.data[self.offset(index)]
    }
}

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
