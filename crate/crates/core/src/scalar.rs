//! Floating-point element types.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor): `f64` for training and
/// correctness checks, `f32` for latency benchmarks.
pub trait Real:
    Float
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
    /// Short precision tag, `"float32"` or `"float64"`.
    const PRECISION: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: &'static str = "float32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: &'static str = "float64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
