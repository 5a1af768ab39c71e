//! Scalar abstraction shared by the numeric modules.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by every geometric routine: `f32` or `f64`.
pub trait Real: RealField + Copy + FloatConst + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_rad(self) -> Self {
        self * Self::pi() / Self::lit(180.0)
    }

    #[inline]
    fn to_deg(self) -> Self {
        self * Self::lit(180.0) / Self::pi()
    }

    /// Lossy conversion back to `f64`, for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
