//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the engine is generic over: `f32` (default) or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Widens to `f64` (exact for both supported types).
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    /// Converts from another scalar type, rounding to nearest.
    #[inline]
    fn cast_from<U: Scalar>(x: U) -> Self {
        Self::lit(x.as_f64())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
