//! Scalar abstraction shared by every geometric and filtering routine.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating point scalar: `f32` or `f64`.
///
/// `TOL` is the absolute tolerance used for degeneracy detection and for
/// validating rotation matrices. It is `1e-9` for `f64`; `f32` cannot resolve
/// that and uses `1e-5` instead.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const TOL: f64;

    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn tol() -> Self {
        Self::lit(Self::TOL)
    }
}

impl Real for f32 {
    const TOL: f64 = 1e-5;
}

impl Real for f64 {
    const TOL: f64 = 1e-9;
}

#[inline]
pub(crate) fn deg<T: Real>(rad: T) -> T {
    rad * T::lit(180.0) / T::pi()
}

#[inline]
pub(crate) fn rad<T: Real>(deg: T) -> T {
    deg * T::pi() / T::lit(180.0)
}
