//! Scalar abstraction for the numeric core.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// `nalgebra::RealField` supplies the transcendental and ordering methods the
/// solver needs; the `num_traits` conversions bridge literals and file I/O.
pub trait Real:
    nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + std::iter::Sum<Self>
{
}

impl<T> Real for T where
    T: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + std::iter::Sum<T>
{
}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn fl<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Positive infinity in the working scalar type (for one-sided bounds).
#[inline]
pub fn inf<T: Real>() -> T {
    fl(f64::INFINITY)
}
