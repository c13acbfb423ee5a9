//! Scalar abstraction: every numeric routine in this crate is generic over
//! `Scalar`, instantiated at `f32` for training speed and at `f64` for
//! finite-difference verification.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable in tensors, losses and optimizers.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum<Self> {
    /// Widen to `f64` for reporting and logging.
    fn as_f64(self) -> f64;

    /// Draw from the unit Gaussian.
    fn std_normal<R: Rng>(rng: &mut R) -> Self;

    /// Draw uniformly from `[lo, hi)`.
    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

/// Shorthand cast from an `f64` literal into the active scalar type.
#[inline]
pub fn fl<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}
