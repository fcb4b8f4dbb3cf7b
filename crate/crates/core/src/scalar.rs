//! Scalar abstraction: every numeric routine in the crate is generic over a
//! floating-point type. `f32` is the training precision, `f64` the gradient
//! checking precision.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Cast from `f64`, panicking on unrepresentable values (never happens
    /// for the float types this crate instantiates).
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 -> scalar cast")
    }

    fn cast_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar -> f64 cast")
    }

    fn cast_f32(self) -> f32 {
        <Self as ToPrimitive>::to_f32(&self).expect("scalar -> f32 cast")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Default
        + Send
        + Sync
        + 'static
{
}
