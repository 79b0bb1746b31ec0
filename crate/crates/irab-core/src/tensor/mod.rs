//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply cloneable handle to a shape + value buffer,
//! with an optional gradient slot. Operations are methods on a [`Tape`],
//! which records every executed op in execution order; [`Tape::backward`]
//! replays the record in reverse, accumulating vector-Jacobian products
//! into the gradient slot of every `requires_grad` tensor reachable from
//! the loss.
//!
//! Conventions, fixed on purpose:
//! - double precision everywhere, so finite-difference checks are sharp;
//! - image data is NCHW, row-major;
//! - no broadcasting beyond tensor-times-scalar;
//! - max-pool ties break to the first index in row-major window order.

mod gradcheck;
mod ops;
mod tape;
#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use tape::Tape;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Handle to a dense n-dimensional array of f64 values.
///
/// Cloning a `Tensor` clones the handle, not the buffer; a parameter held
/// by a model and recorded on a tape is the same storage, which is how
/// `backward` can populate its gradient. A tape and its tensors belong to
/// one worker at a time (the handle is deliberately not `Send`).
#[derive(Clone)]
pub struct Tensor {
    id: u64,
    data: Rc<RefCell<TensorData>>,
}

impl Tensor {
    fn fresh(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            data: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                requires_grad,
                grad: None,
            })),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(CoreError::invalid(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Self::fresh(values, shape.to_vec(), false))
    }

    /// Trainable tensor: participates in `backward` and gets a gradient.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(values, shape)?;
        t.data.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::fresh(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::fresh(vec![value; numel], shape.to_vec(), false)
    }

    /// Rank-1 single-element tensor, the representation of scalars.
    pub fn scalar(value: f64) -> Self {
        Self::fresh(vec![value], vec![1], false)
    }

    /// Identity distinct per tensor; used as the gradient-table key.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.data.borrow().values.len()
    }

    /// The four NCHW extents; errors if the tensor is not rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        let d = self.data.borrow();
        match d.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(CoreError::invalid(format!(
                "expected rank-4 NCHW tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.data.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.borrow().values.clone()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics on anything else; callers construct scalars deliberately.
    pub fn item(&self) -> f64 {
        let d = self.data.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.data.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.data.borrow().grad.clone()
    }

    /// Gradient buffer, treating "never reached by backward" as zero.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let d = self.data.borrow();
        d.grad.clone().unwrap_or_else(|| vec![0.0; d.values.len()])
    }

    /// Constant copy of this tensor's current values. Gradients do not
    /// flow from uses of the copy back to this tensor.
    pub fn detach(&self) -> Tensor {
        let d = self.data.borrow();
        Self::fresh(d.values.clone(), d.shape.clone(), false)
    }

    pub fn all_finite(&self) -> bool {
        self.data.borrow().values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn set_grad(&self, grad: Option<Vec<f64>>) {
        self.data.borrow_mut().grad = grad;
    }

    pub(crate) fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        RefMut::map(self.data.borrow_mut(), |d| &mut d.values)
    }

    pub(crate) fn set_values(&self, values: Vec<f64>) -> Result<()> {
        let mut d = self.data.borrow_mut();
        if values.len() != d.values.len() {
            return Err(CoreError::invalid(format!(
                "set_values length {} does not match tensor numel {}",
                values.len(),
                d.values.len()
            )));
        }
        d.values = values;
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.id, d.shape, d.requires_grad
        )
    }
}

