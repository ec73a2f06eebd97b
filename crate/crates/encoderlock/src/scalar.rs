//! Scalar abstraction for the numeric core.
//!
//! Everything numerical in this crate (losses, metrics, the training
//! engine) is generic over [`Scalar`] so the same code runs in `f32` for
//! speed and in `f64` where tests need finite-difference headroom.

use ndarray::NdFloat;
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable throughout the crate.
///
/// Bundles the ndarray arithmetic bounds with conversion helpers and RNG
/// sampling so generic code never has to spell out distribution bounds.
pub trait Scalar: NdFloat + SampleUniform + Default + serde::Serialize {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Shorthand for `Scalar::from_f64` at call sites dense with constants.
#[inline]
pub fn s<F: Scalar>(x: f64) -> F {
    F::from_f64(x)
}
