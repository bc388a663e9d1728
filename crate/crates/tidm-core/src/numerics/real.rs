//! Scalar abstraction over f32/f64.
//!
//! Production tensors are 32-bit. The gradient-check harness runs the same
//! kernels at f64 so central differences are not drowned by rounding noise.

use num_traits::{Float, NumCast};

pub trait Real:
    Float + NumCast + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f32(x: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
    fn from_f64(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand for typed constants inside generic kernels.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x)
}
