//! Dense f32 tensor handles.
//!
//! A `Tensor` is a cheaply clonable handle to a flat row-major f32 buffer
//! plus an optional gradient buffer of the same shape. Data and gradient
//! live in separate cells so a backward rule can read one input's values
//! while accumulating into the same tensor's gradient.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::trunc_normal;

#[derive(Clone)]
pub struct Tensor {
    shape: Rc<Vec<usize>>,
    data: Rc<RefCell<Vec<f32>>>,
    grad: Rc<RefCell<Option<Vec<f32>>>>,
    requires_grad: Rc<Cell<bool>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} does not hold {} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(RefCell::new(data)),
            grad: Rc::new(RefCell::new(None)),
            requires_grad: Rc::new(Cell::new(false)),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Trainable parameter initialized from a truncated normal (std, |z|<=2).
    pub fn randn_param(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| trunc_normal(rng, std)).collect();
        let t = Tensor::from_vec(shape, data).expect("randn_param: valid shape");
        t.set_requires_grad(true);
        t
    }

    /// Trainable parameter of zeros (biases, layer-norm beta).
    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let t = Tensor::zeros(shape);
        t.set_requires_grad(true);
        t
    }

    /// Trainable parameter of a constant (layer-norm gamma).
    pub fn full_param(shape: &[usize], value: f32) -> Tensor {
        let t = Tensor::full(shape, value);
        t.set_requires_grad(true);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<f32> {
        self.data.borrow().clone()
    }

    /// Overwrite the buffer in place (optimizer updates, checkpoint load).
    pub fn set_data(&self, new: &[f32]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("{} elements into shape {:?}", new.len(), self.shape()),
            ));
        }
        self.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Scalar extraction; panics if the tensor is not single-element.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Accumulate into the gradient buffer (allocated on first use).
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.grad.borrow_mut() = Some(vec![1.0; self.numel()]);
    }

    /// Run `f` on the gradient buffer if one has accumulated. Holding the
    /// borrow is safe for backward rules: an op's output is never also
    /// its input, and data lives in a separate cell.
    pub(crate) fn with_grad<F: FnOnce(&[f32])>(&self, f: F) {
        let slot = self.grad.borrow();
        if let Some(g) = slot.as_ref() {
            f(g);
        }
    }

    /// Copy of the values with no gradient participation.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.data_vec()).expect("detach")
    }

    /// Two handles referring to the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.borrow().iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        let preview: Vec<f32> = d.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{{shape:{:?}, requires_grad:{}, data:{:?}{}}}",
            self.shape(),
            self.requires_grad(),
            preview,
            if d.len() > 8 { ", ..." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn detach_breaks_sharing() {
        let t = Tensor::full(&[2], 5.0);
        t.set_requires_grad(true);
        let d = t.detach();
        assert!(!d.requires_grad());
        assert!(!d.same_storage(&t));
        assert_eq!(d.data_vec(), vec![5.0, 5.0]);
    }
}
