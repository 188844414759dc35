//! Scalar abstraction so every model can run in f32 for speed and f64 for
//! numerical verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type of all tensors in this workspace.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Inverse of `softplus`, useful for picking bias values that make
/// `softplus(bias)` land on a wanted positive constant.
pub fn inverse_softplus(y: f64) -> f64 {
    // softplus(x) = ln(1 + e^x)  =>  x = ln(e^y - 1)
    (y.exp() - 1.0).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_softplus_round_trip() {
        for &y in &[0.1, 0.5, 1.0, 2.0, 10.0] {
            let x = inverse_softplus(y);
            let sp = (1.0 + x.exp()).ln();
            assert!((sp - y).abs() < 1e-12, "y={y} sp={sp}");
        }
    }
}
