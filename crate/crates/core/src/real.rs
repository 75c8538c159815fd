//! Scalar abstraction over `f32`/`f64`.
//!
//! Parameters and activations are `f32` in production; the finite-difference
//! gradient oracle and precision-sensitive tests instantiate the same code at
//! `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

pub trait Real:
    Float + NumAssign + ScalarOperand + LinalgScalar + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
