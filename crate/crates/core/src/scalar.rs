//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the crate is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal or configuration value into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Relative threshold below which a singular value counts as zero.
    ///
    /// `1e-12` for `f64`; widened to a few ulps for narrower types.
    fn rank_tolerance() -> Self {
        Self::lit(1e-12).max(Self::epsilon() * Self::lit(16.0))
    }

    /// Allowed deviation of `UᵀU` from the identity for "orthonormal" inputs.
    fn gram_tolerance() -> Self {
        Self::lit(1e-8).max(Self::epsilon() * Self::lit(1e3))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerances_follow_precision() {
        assert_eq!(f64::rank_tolerance(), 1e-12);
        assert_eq!(f64::gram_tolerance(), 1e-8);
        assert!(f32::rank_tolerance() > 1e-7);
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(2.5f32.as_f64(), 2.5);
    }
}
