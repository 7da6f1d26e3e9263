//! Minimal dense tensor with reverse-mode differentiation.
//!
//! Values are immutable once created by an op; parameters (leaf tensors with
//! `requires_grad`) may be updated in place between forward passes through
//! [`Tensor::apply_update`]. Differentiation is a define-by-run tape: every op
//! that touches a gradient-carrying tensor pushes a backward closure onto the
//! [`Tape`], and [`Tape::backward`] runs the closures in reverse order.

mod elem;
mod kernels;
mod na_ops;
mod ops;

pub mod gradcheck;

pub use elem::Elem;
pub use na_ops::PaddingPolicy;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, FlowError, Result};

struct TensorData<E> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    /// True when this tensor is a leaf with `requires_grad`, or was produced
    /// from one; gradients propagate through exactly these tensors.
    needs_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
}

/// Dense row-major N-dimensional array, cheaply cloneable (shared buffer).
pub struct Tensor<E> {
    inner: Rc<TensorData<E>>,
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![E::ZERO; numel], false, false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; numel], false, false)
    }

    pub fn scalar(value: E) -> Self {
        Self::build(vec![], vec![value], false, false)
    }

    /// Leaf tensor that accumulates a gradient during backward().
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, true, true))
    }

    fn build(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, needs_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(TensorData {
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<E>, needs_grad: bool) -> Self {
        Self::build(shape, data, false, needs_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Accumulated gradient, if backward() reached this tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place parameter update (optimizer step). Not recorded on any tape.
    pub fn apply_update(&self, f: impl FnMut(usize, &mut E)) {
        let mut data = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    /// Overwrite the value buffer (checkpoint loading).
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(shape_err(
                "set_data",
                format!("expected {} values, got {}", self.numel(), values.len()),
            ));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Run `f` on the output gradient if backward reached this tensor.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&[E]) -> R) -> Option<R> {
        let g = self.inner.grad.borrow();
        g.as_deref().map(f)
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[E]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(contribution) {
                    *d = *d + *s;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }

    /// Scale an accumulated gradient in place (e.g. averaging over a batch).
    pub fn scale_grad(&self, factor: E) {
        if let Some(buf) = self.inner.grad.borrow_mut().as_mut() {
            for v in buf.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::ONE; self.numel()]);
    }

    /// Convert elementwise through f64 (used by the gradient checker).
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let data = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|v| F::from_f64(v.to_f64()))
            .collect();
        Tensor::<F>::build(
            self.inner.shape.clone(),
            data,
            self.inner.requires_grad,
            self.inner.needs_grad,
        )
    }
}

type BackwardFn = Box<dyn Fn()>;

/// Define-by-run gradient tape. One tape per forward pass; no reuse.
pub struct Tape<E> {
    ops: RefCell<Vec<BackwardFn>>,
    consumed: Cell<bool>,
    enabled: bool,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            enabled: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// Tape that records nothing; forward-only evaluation.
    pub fn no_grad() -> Self {
        Tape {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn num_recorded(&self) -> usize {
        self.ops.borrow().len()
    }

    pub(crate) fn record_if(&self, needed: bool, f: impl Fn() + 'static) -> bool {
        let active = self.enabled && needed;
        if active {
            self.ops.borrow_mut().push(Box::new(f));
        }
        active
    }

    /// Reverse pass from a scalar loss. Errors if the tape was already used.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if self.consumed.get() {
            return Err(FlowError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        self.consumed.set(true);
        loss.seed_grad_ones();
        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            op();
        }
        Ok(())
    }
}

/// Grad of `t`, or zeros when backward never reached it.
pub fn grad_or_zeros<E: Elem>(t: &Tensor<E>) -> Vec<E> {
    t.grad().unwrap_or_else(|| vec![E::ZERO; t.numel()])
}

#[cfg(test)]
mod tests;
