//! Scalar abstraction over the two numeric modes.
//!
//! Training runs in 32-bit; gradient checks run in 64-bit, where central
//! finite differences are actually trustworthy. The mode is picked once per
//! run by instantiating the generic stack at `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Which floating-point width a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NumericMode {
    F32,
    F64,
}

impl Display for NumericMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NumericMode::F32 => write!(f, "f32"),
            NumericMode::F64 => write!(f, "f64"),
        }
    }
}

/// Element type of every tensor in the stack.
pub trait Scalar:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum<Self>
{
    const ZERO: Self;
    const ONE: Self;
    const MODE: NumericMode;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn fmax(self, other: Self) -> Self;
    fn fmin(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty, $mode:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const MODE: NumericMode = $mode;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            #[inline]
            fn fmax(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn fmin(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32, NumericMode::F32);
impl_scalar!(f64, NumericMode::F64);

/// Shorthand for converting an `f64` literal into the active scalar type.
#[inline]
pub fn fl<F: Scalar>(v: f64) -> F {
    F::from_f64(v)
}

/// Numerically stable sigmoid.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// `x * sigmoid(x)`, the base-path activation of KAN edges.
#[inline]
pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// Derivative of silu: `sigma(x) * (1 + x * (1 - sigma(x)))`.
#[inline]
pub fn silu_deriv<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::ONE + x * (F::ONE - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_tags_match_types() {
        assert_eq!(<f32 as Scalar>::MODE, NumericMode::F32);
        assert_eq!(<f64 as Scalar>::MODE, NumericMode::F64);
    }

    #[test]
    fn silu_matches_definition() {
        for &x in &[-5.0f64, -0.3, 0.0, 0.7, 4.2] {
            let expected = x / (1.0 + (-x).exp());
            assert!((silu(x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_deriv_matches_finite_difference() {
        let h = 1e-6f64;
        for &x in &[-3.0f64, -1.0, 0.0, 0.5, 2.0] {
            let numeric = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_deriv(x) - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(1000.0f64).is_finite());
        assert!(sigmoid(-1000.0f64).is_finite());
        assert!((sigmoid(1000.0f64) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-1000.0f64) < 1e-12);
    }
}
