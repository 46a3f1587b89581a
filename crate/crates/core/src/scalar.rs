//! Scalar abstraction shared by the geometry, density and closed-form kernel code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the generic geometry code (`f32`, `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Tolerance used when validating manifold constraints for this precision.
    #[inline]
    fn manifold_tol() -> Self {
        let eps = Self::default_epsilon() * Self::lit(1e3);
        eps.max(Self::lit(1e-9))
    }
}

impl Real for f32 {}
impl Real for f64 {}
