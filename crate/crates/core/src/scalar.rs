//! Scalar abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating-point type the library is generic over.
///
/// Implemented for `f32` and `f64`. Tolerances that depend on machine
/// precision are expressed through [`Real::tolerance`] so that `f32`
/// instantiations do not chase unreachable `f64` accuracy.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + LinalgScalar
    + ScalarOperand
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lift an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Lift a count into `Self`.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    /// `max(floor, 64·eps)`: a requested tolerance, clipped to what the
    /// type can actually resolve.
    #[inline]
    fn tolerance(floor: f64) -> Self {
        let eps = Self::epsilon() * Self::lit(64.0);
        Self::lit(floor).max(eps)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
