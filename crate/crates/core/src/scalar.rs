//! Scalar abstraction for the numeric core.
//!
//! Everything that does math (tensors, the autodiff graph, the optimizer,
//! gradient checking) is generic over [`Scalar`]. `f64` is the working type
//! for all training state; `f32` exists for the on-disk feature payload.

use std::fmt::{Debug, Display};

pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// How constants enter generic code.
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
