//! Float abstraction so every numeric path runs at either precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Scalar type the tensor and graph machinery is generic over.
///
/// `from_f64`/`to_f64` are total: every config value and literal in the
/// codebase is representable in `f32`.
pub trait Scalar:
    Float + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid<S: Scalar>(x: S) -> S {
        S::one() / (S::one() + (-x).exp())
    }

    #[test]
    fn generic_math_matches_native() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(2.0f64) - 0.880797077977882).abs() < 1e-12);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let x = 0.123456789012345_f64;
        assert_eq!(f64::from_f64(x).to_f64(), x);
    }
}
