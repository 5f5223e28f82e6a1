//! Scalar abstraction shared by the signal path and the differentiation engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// True when no element is infinite or NaN.
    fn all_finite(xs: &[Self]) -> bool {
        xs.iter().all(|x| x.is_finite())
    }
}

// Branch-free exponent test so the scan vectorizes.
impl Real for f32 {
    fn all_finite(xs: &[Self]) -> bool {
        const EXP: u32 = 0x7f80_0000;
        xs.iter().fold(0u32, |acc, x| acc | u32::from(x.to_bits() & EXP == EXP)) == 0
    }
}

impl Real for f64 {
    fn all_finite(xs: &[Self]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        xs.iter().fold(0u64, |acc, x| acc | u64::from(x.to_bits() & EXP == EXP)) == 0
    }
}
