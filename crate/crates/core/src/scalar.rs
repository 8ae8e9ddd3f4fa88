//! Scalar abstraction shared by the activation, spline and quadrature code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar usable by the generic math modules (`f32` or `f64`).
pub trait Real: Float + FloatConst + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable logistic function `1 / (1 + exp(-x))`.
pub fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + exp(x))` without overflow for large `|x|`.
pub fn log1p_exp<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(logistic(1.0e6_f64), 1.0);
        assert_eq!(logistic(-1.0e6_f64), 0.0);
        assert!((logistic(0.0_f64) - 0.5).abs() < 1e-16);
        assert!((logistic(0.0_f32) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn log1p_exp_matches_naive_in_safe_range() {
        for &x in &[-30.0_f64, -2.0, 0.0, 0.5, 12.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((log1p_exp(x) - naive).abs() < 1e-14);
        }
        assert_eq!(log1p_exp(1.0e4_f64), 1.0e4);
    }
}
