//! Scalar abstraction for the signal kernels.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! kernels run in `f32` (the shipped pipeline and the wire formats) or `f64`
//! (reference computations in tests).

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the scalar type, panicking only for
/// non-representable values (which none of our constants are).
#[inline]
pub fn scalar<S: Scalar>(value: f64) -> S {
    S::from_f64(value).expect("constant representable in scalar type")
}
