//! Scalar abstraction: every model in this crate is generic over the float
//! type, with `f64` as the reference precision (checkpoints are stored as
//! 64-bit floats regardless of the in-memory scalar).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable for all model math: f32 or f64.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + 'static
{
    /// Lossy conversion from f64 (identity for f64).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to f64 (identity for f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Relative error |a - b| / max(|a|, |b|, floor), in f64.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / denom
}

/// Comparison rule for analytic-vs-finite-difference gradient checks:
/// relative error below `rel_tol` for coordinates large enough to resolve,
/// absolute agreement below 1e-8 otherwise (central differences on an O(1)
/// objective cannot resolve coordinates near the FD noise floor).
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    if analytic.abs() > 1e-6 || numeric.abs() > 1e-6 {
        rel_err(analytic, numeric) < rel_tol
    } else {
        (analytic - numeric).abs() < 1e-8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_roundtrip_for_f64() {
        let v = 0.123456789f64;
        assert_eq!(f64::from_f64_lossy(v), v);
        assert_eq!(v.to_f64_lossy(), v);
    }

    #[test]
    fn rel_err_is_zero_on_equal() {
        assert_eq!(rel_err(3.5, 3.5), 0.0);
        assert!(rel_err(1.0, 1.0001) < 2e-4);
    }
}
