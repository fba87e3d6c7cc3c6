//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type used by networks, distances and metrics.
///
/// Implemented for `f32` and `f64`. Hyperparameters are carried as `f64`
/// in configuration structs and converted with [`Scalar::lit`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Name written into checkpoint headers.
    const NAME: &'static str;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Formats a value with 17 significant digits. Enough to round-trip any
/// `f64` (and therefore any `f32`) exactly.
pub fn format_exact<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

/// Parses a value written by [`format_exact`] (or any decimal float).
pub fn parse_exact<T: Scalar>(s: &str) -> Option<T> {
    s.trim().parse::<f64>().ok().and_then(T::from_f64)
}
