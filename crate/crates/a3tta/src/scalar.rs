//! Element type abstraction for the numeric pipeline.
//!
//! Everything runs in `f32` by default. Gradient checks instantiate the same
//! code in `f64` so finite differences are trustworthy at step sizes around
//! 1e-5, which would drown in `f32` rounding noise.

use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element usable throughout the model and losses.
///
/// `NdFloat` brings arithmetic, comparisons, `ScalarOperand` and the linalg
/// bounds needed for `ndarray::Array::dot`.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum + serde::Serialize {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Draws one standard normal sample. Lives here so generic init code does
    /// not need a `rand_distr::Distribution<F>` bound at every call site.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}
