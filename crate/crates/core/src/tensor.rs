//! Dense row-major tensors and the scalar trait shared by every kernel.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` when gradient checks need a high-precision shadow.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub trait Real:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
}

#[inline]
pub(crate) fn lit<T: Real>(v: f64) -> T {
    T::from(v).expect("literal fits the scalar type")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("finite cast"))
                .collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, shape, &self.shape));
        }
        Ok(())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::add_assign",
                &self.shape,
                &other.shape,
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self -= lr * grad`, elementwise.
    pub fn sgd_step(&mut self, grad: &Tensor<T>, lr: T) -> Result<()> {
        if self.shape != grad.shape {
            return Err(Error::shape("Tensor::sgd_step", &self.shape, &grad.shape));
        }
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= lr * *g;
        }
        Ok(())
    }
}

/// Weight and bias of one conv or fully-connected layer.
///
/// FC weights are `[d_out, d_in]`; conv weights `[c_out, c_in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(weight_shape: &[usize]) -> Self {
        Self {
            weight: Tensor::zeros(weight_shape),
            bias: Tensor::zeros(&weight_shape[..1]),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Dynamic FLOP instrumentation.
///
/// Kernels report the FLOPs they execute into a thread-local counter. The
/// convention matches [`crate::cost`]: two per multiply-accumulate, one per
/// bias add or ReLU element, three comparisons per 2x2 pooling window.
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }

    #[inline]
    pub fn add(n: u64) {
        COUNTER.with(|c| c.set(c.get() + n));
    }

    pub fn reset() {
        COUNTER.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        COUNTER.with(|c| c.get())
    }

    /// Runs `f` and returns the FLOPs it executed on this thread.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::vector(vec![1.0f32, f32::NAN]);
        assert!(matches!(t.check_finite("t"), Err(Error::NonFinite("t"))));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut p = Tensor::vector(vec![1.0f32, 2.0]);
        let g = Tensor::vector(vec![0.5f32, -1.0]);
        p.sgd_step(&g, 0.1).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }
}
