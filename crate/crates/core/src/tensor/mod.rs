//! Dense tensors, the reverse-mode tape, seeded randomness and the
//! finite-difference gradient oracle.
//!
//! A [`Tensor`] is a plain value: a shape plus a shared, copy-on-write
//! buffer. Differentiation happens on a [`Tape`], which records primitive
//! applications over [`Var`] handles and replays them backwards.

mod element;
mod gradcheck;
pub mod kernels;
mod rng;
mod tape;

pub use element::Element;
pub use gradcheck::{gradient_check, gradient_check_all, primitive_suite, SUITE_EPS};
pub use rng::{Rng, Stream};
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
///
/// Cloning is cheap: the buffer is reference counted and copied only on
/// mutation.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting shape/length disagreement and non-finite scalars.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements but buffer has {}", data.len()),
            ));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, Arc::new(vec![value; n]))
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], Arc::new(data))
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        Self::from_parts(shape, Arc::new(data))
    }

    /// Uniform entries on `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(lo + (hi - lo) * rng.uniform())).collect();
        Self::from_parts(shape, Arc::new(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape, self.shared()))
    }

    /// Converts element width.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect();
        Tensor::from_parts(self.shape.clone(), Arc::new(data))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} elements for tensor {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(kernels::max_abs_diff(self.data(), other.data()))
    }

    /// `max|a - b| / max|b|`, the normwise relative deviation used by the
    /// equivalence tests.
    pub fn max_rel_diff(&self, reference: &Tensor<T>) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(Error::shape("max_rel_diff", format!("{:?} vs {:?}", self.shape, reference.shape)));
        }
        Ok(kernels::max_rel_diff(self.data(), reference.data()))
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    /// Bitwise equality of shape and data; gradient slots are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.bits() == b.bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn clone_is_copy_on_write() {
        let a = Tensor::<f32>::zeros(vec![4]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn grad_slot_accumulates() {
        let mut t = Tensor::<f64>::zeros(vec![2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
