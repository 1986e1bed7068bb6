//! Floating-point abstraction shared by the reduced-order engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the engine can run on: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `S`.
#[inline(always)]
pub fn lit<S: Scalar>(v: f64) -> S {
    // f64 -> f32 never fails, it rounds.
    S::from_f64(v).unwrap()
}

/// Widens `S` to `f64` for reporting and I/O.
#[inline(always)]
pub fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Weighted average on the four collocation points `{0, L/3, 2L/3, L}`.
///
/// Weights `(1, 3, 3, 1)/8` integrate cubics exactly on that grid.
#[inline]
pub fn quad4<S: Scalar>(v: &[S; 4]) -> S {
    (v[0] + lit::<S>(3.0) * (v[1] + v[2]) + v[3]) / lit(8.0)
}

/// Arithmetic mean of four values.
#[inline]
pub fn mean4<S: Scalar>(v: &[S; 4]) -> S {
    (v[0] + v[1] + v[2] + v[3]) / lit(4.0)
}
