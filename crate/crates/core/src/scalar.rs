//! Scalar abstraction so the tensor engine works at both f32 and f64.
//!
//! Everything numeric in the engine is generic over [`Scalar`]; the training
//! stack instantiates it at f64 (file formats and metrics are f64 end to end).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of tensors.
///
/// A thin bundle over `num_traits::Float` plus the assign/iterator traits the
/// kernels want. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Guard floor used by `log`, norm and contrast denominators.
    const GUARD_EPS: Self;

    /// Convert an f64 literal; panics only on genuinely unrepresentable
    /// values, which never occur for the constants used here.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }

    /// Lossy view as f64 for logging and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {
    const GUARD_EPS: Self = 1e-12;
}

impl Scalar for f64 {
    const GUARD_EPS: Self = 1e-12;
}
