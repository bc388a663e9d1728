//! Dense row-major tensors.
//!
//! Tensors are immutable values; cloning is cheap (shared buffer). Every
//! public constructor and operation checks that all values are finite —
//! NaN/Inf is reported as an error rather than propagated.

use crate::error::{Result, TidmError};
use crate::numerics::real::Real;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct GTensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

/// Production precision.
pub type Tensor = GTensor<f32>;

impl<T: Real> GTensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TidmError::shape(
                "tensor",
                format!("invalid shape {shape:?}: dims must be nonempty and >= 1"),
            ));
        }
        if numel != data.len() {
            return Err(TidmError::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        let t = GTensor {
            shape,
            data: Arc::new(data),
        };
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// Construct without the finite check. Internal ops validate their own
    /// outputs; this avoids scanning the same buffer twice.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        GTensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        GTensor::from_vec_unchecked(shape.to_vec(), vec![T::zero(); numel])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        GTensor::from_vec_unchecked(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        GTensor::from_vec_unchecked(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TidmError::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TidmError::NonFinite { op })
        }
    }

    /// Same data viewed under a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<GTensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TidmError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(GTensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Real>(&self) -> GTensor<U> {
        GTensor::from_vec_unchecked(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.to_f64_lossy())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> GTensor<T> {
        GTensor::from_vec_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(
        &self,
        other: &GTensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<GTensor<T>> {
        if self.shape != other.shape {
            return Err(TidmError::shape(
                op,
                format!("shape mismatch {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(GTensor::from_vec_unchecked(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &GTensor<T>) -> Result<GTensor<T>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &GTensor<T>) -> Result<GTensor<T>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &GTensor<T>) -> Result<GTensor<T>> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> GTensor<T> {
        self.map(|v| v * c)
    }

    /// a + c*b, elementwise.
    pub fn add_scaled(&self, other: &GTensor<T>, c: T) -> Result<GTensor<T>> {
        self.zip(other, "add_scaled", |a, b| a + c * b)
    }

    pub fn clamp_values(&self, lo: T, hi: T) -> GTensor<T> {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    /// Sum of all elements (fixed left-to-right order).
    /// Sum with f64 accumulation, so the result is stable under
    /// reorderings of the data (e.g. shuffled batch assembly).
    pub fn sum(&self) -> T {
        let acc: f64 = self.data.iter().map(|&v| v.to_f64_lossy()).sum();
        T::from_f64(acc)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    /// Mean squared difference against another tensor of the same shape.
    pub fn mse(&self, other: &GTensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(TidmError::shape(
                "mse",
                format!("shape mismatch {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut acc = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            acc += d * d;
        }
        Ok(T::from_f64(acc / self.numel() as f64))
    }

    pub fn max_abs_diff(&self, other: &GTensor<T>) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }
}

impl Tensor {
    /// FNV-1a over the raw little-endian bytes. Used for bitwise-equality
    /// checks in determinism tests and checkpoint fixtures.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.data.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn empty_and_zero_shapes_rejected() {
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::from_vec(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 5.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 7.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 10.0]);
        assert_eq!(a.add_scaled(&b, 2.0).unwrap().data(), &[7.0, 12.0]);
        let c = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 4.0]).unwrap();
        assert_eq!(a.mse(&b).unwrap(), 2.0);
    }

    #[test]
    fn cast_round_trip() {
        let a = Tensor::from_vec(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        let d: GTensor<f64> = a.cast();
        let back: Tensor = d.cast();
        assert_eq!(a.data(), back.data());
    }
}
