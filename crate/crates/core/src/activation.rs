//! Scalar activation family: ReLU, the β-reparameterized SiLU and Softplus,
//! the curvature tuning unit (CTU) that blends them, and its derivatives.
//!
//! With `u = 1 - β + ε`, the two branches are
//!
//! ```text
//! silu_η(x)     = σ(η x) · x,              η = β / u
//! softplus_γ(x) = (1/γ) · ln(1 + exp(γ x)), γ = 1 / u
//! ctu(x)        = c · silu_η(x) + (1 - c) · softplus_γ(x)
//! ```
//!
//! β → 1 recovers ReLU, β = 0.5 with c = 1 is the ordinary SiLU, and β → 0
//! with c = 1 degenerates to the linear map `x / 2`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log1p_exp, logistic, Real};

/// Stabilizer added to `1 - β` so that β = 1 stays well defined.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Softplus switches to the identity once `γ x` exceeds this value.
pub const DEFAULT_SOFTPLUS_THRESHOLD: f64 = 20.0;
/// Raw β used to initialize trainable units; `logistic(1.386) ≈ 0.8`.
pub const DEFAULT_RAW_BETA: f64 = 1.386;
/// Raw mixing coefficient used to initialize trainable units; decodes to 0.5.
pub const DEFAULT_RAW_COEFF: f64 = 0.0;

/// Curvature (β) and mixing (c) parameters of a CTU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtuParams<T> {
    beta: T,
    c: T,
    eps: T,
    softplus_threshold: T,
}

impl<T: Real> CtuParams<T> {
    /// Builds parameters with the default stabilizer and softplus threshold.
    pub fn new(beta: T, c: T) -> Result<Self> {
        Self::with_options(
            beta,
            c,
            T::lit(DEFAULT_EPS),
            T::lit(DEFAULT_SOFTPLUS_THRESHOLD),
        )
    }

    pub fn with_options(beta: T, c: T, eps: T, softplus_threshold: T) -> Result<Self> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(beta) {
            return Err(Error::InvalidParameter(format!("beta={beta} outside [0, 1]")));
        }
        if !unit(c) {
            return Err(Error::InvalidParameter(format!("c={c} outside [0, 1]")));
        }
        if !(eps >= T::zero()) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps={eps} must be finite and >= 0")));
        }
        if softplus_threshold.is_nan() {
            return Err(Error::InvalidParameter("softplus threshold is NaN".into()));
        }
        Ok(Self {
            beta,
            c,
            eps,
            softplus_threshold,
        })
    }

    /// Same β and c with a different stabilizer (`eps = 0` gives the exact formulas).
    pub fn with_eps(self, eps: T) -> Result<Self> {
        Self::with_options(self.beta, self.c, eps, self.softplus_threshold)
    }

    /// Same β and c with a different softplus threshold (`+inf` disables it).
    pub fn with_threshold(self, softplus_threshold: T) -> Result<Self> {
        Self::with_options(self.beta, self.c, self.eps, softplus_threshold)
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn c(&self) -> T {
        self.c
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn softplus_threshold(&self) -> T {
        self.softplus_threshold
    }

    /// `1 - β + ε`.
    pub fn temperature(&self) -> T {
        T::one() - self.beta + self.eps
    }

    /// Sharpness of the SiLU branch, `β / (1 - β + ε)`.
    pub fn eta(&self) -> T {
        self.beta / self.temperature()
    }

    /// Sharpness of the Softplus branch, `1 / (1 - β + ε)`.
    pub fn gamma(&self) -> T {
        T::one() / self.temperature()
    }
}

/// Unconstrained encoding of [`CtuParams`] used for gradient-based training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCtuParams<T> {
    pub raw_beta: T,
    pub raw_coeff: T,
}

impl<T: Real> RawCtuParams<T> {
    pub fn new(raw_beta: T, raw_coeff: T) -> Self {
        Self { raw_beta, raw_coeff }
    }

    /// Maps both raw values through the logistic function.
    pub fn decode(&self) -> CtuParams<T> {
        self.decode_with(T::lit(DEFAULT_EPS), T::lit(DEFAULT_SOFTPLUS_THRESHOLD))
    }

    pub fn decode_with(&self, eps: T, softplus_threshold: T) -> CtuParams<T> {
        CtuParams {
            beta: logistic(self.raw_beta),
            c: logistic(self.raw_coeff),
            eps,
            softplus_threshold,
        }
    }
}

impl<T: Real> Default for RawCtuParams<T> {
    fn default() -> Self {
        Self::new(T::lit(DEFAULT_RAW_BETA), T::lit(DEFAULT_RAW_COEFF))
    }
}

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

/// `σ(η x) · x` with `η = β / (1 - β + eps)`.
pub fn silu_eta<T: Real>(x: T, beta: T, eps: T) -> T {
    let eta = beta / (T::one() - beta + eps);
    logistic(eta * x) * x
}

/// `(1/γ) · ln(1 + exp(γ x))` with `γ = 1 / (1 - β + eps)`; returns `x` once `γ x > threshold`.
pub fn softplus_gamma<T: Real>(x: T, beta: T, eps: T, threshold: T) -> T {
    let temp = T::one() - beta + eps;
    let scaled = x / temp;
    if scaled > threshold {
        x
    } else {
        log1p_exp(scaled) * temp
    }
}

pub fn ctu<T: Real>(x: T, p: &CtuParams<T>) -> T {
    let silu = silu_eta(x, p.beta, p.eps);
    let softplus = softplus_gamma(x, p.beta, p.eps, p.softplus_threshold);
    p.c * silu + (T::one() - p.c) * softplus
}

/// Closed-form `dφ/dx`:
/// `c (σ(ηx) + ηx σ(ηx)(1 - σ(ηx))) + (1 - c) σ(γx)`.
///
/// With `eps = 0` this is exactly the textbook form with `b = β/(1-β)` and
/// `γ = b/β`. Exact β ∈ {0, 1} is rejected.
pub fn ctu_derivative<T: Real>(x: T, p: &CtuParams<T>) -> Result<T> {
    if p.beta <= T::zero() || p.beta >= T::one() {
        return Err(Error::InvalidParameter(format!(
            "ctu_derivative needs 0 < beta < 1, got {}",
            p.beta
        )));
    }
    Ok(ctu_derivative_unchecked(x, p))
}

/// [`ctu_derivative`] without the open-interval check; used on ε-stabilized
/// parameters inside networks where β may round to 1.
pub fn ctu_derivative_unchecked<T: Real>(x: T, p: &CtuParams<T>) -> T {
    let eta_x = p.eta() * x;
    let s = logistic(eta_x);
    let silu_grad = s + eta_x * s * (T::one() - s);
    let scaled = p.gamma() * x;
    let softplus_grad = if scaled > p.softplus_threshold {
        T::one()
    } else {
        logistic(scaled)
    };
    p.c * silu_grad + (T::one() - p.c) * softplus_grad
}

/// Second derivative `d²φ/dx²` (used by curvature diagnostics).
pub fn ctu_second_derivative<T: Real>(x: T, p: &CtuParams<T>) -> T {
    let two = T::lit(2.0);
    let eta = p.eta();
    let s = logistic(eta * x);
    let ds = s * (T::one() - s);
    // d/dx [s + ηx s(1-s)] = η ds (2 + ηx (1 - 2s))
    let silu_dd = eta * ds * (two + eta * x * (T::one() - two * s));
    let gamma = p.gamma();
    let scaled = gamma * x;
    let softplus_dd = if scaled > p.softplus_threshold {
        T::zero()
    } else {
        let g = logistic(scaled);
        gamma * g * (T::one() - g)
    };
    p.c * silu_dd + (T::one() - p.c) * softplus_dd
}

/// Partial derivatives `(∂φ/∂β, ∂φ/∂c)` at `x`, accounting for the ε-stabilized
/// reparameterization.
pub fn ctu_param_partials<T: Real>(x: T, p: &CtuParams<T>) -> (T, T) {
    let u = p.temperature();
    let eta = p.beta / u;
    let s = logistic(eta * x);
    let silu = s * x;
    let d_eta_d_beta = (T::one() + p.eps) / (u * u);
    let d_silu_d_beta = x * x * s * (T::one() - s) * d_eta_d_beta;

    let scaled = x / u;
    let (softplus, d_softplus_d_beta) = if scaled > p.softplus_threshold {
        (x, T::zero())
    } else {
        let l = log1p_exp(scaled);
        (l * u, scaled * logistic(scaled) - l)
    };

    let d_beta = p.c * d_silu_d_beta + (T::one() - p.c) * d_softplus_d_beta;
    let d_c = silu - softplus;
    (d_beta, d_c)
}

fn hbar_objective(y: f64) -> f64 {
    let s = logistic(y);
    y * s * (1.0 - s)
}

/// `max_{y ≥ 0} y σ(y) (1 - σ(y))`, the constant in the CTU derivative bound
/// `-c h̄ ≤ φ' ≤ 1 + c h̄`. Computed once by a dense scan followed by
/// golden-section refinement.
pub fn hbar_bound() -> f64 {
    static HBAR: OnceLock<f64> = OnceLock::new();
    *HBAR.get_or_init(|| {
        let step = 1e-3;
        let (best_i, _) = (0..=20_000)
            .map(|i| (i, hbar_objective(i as f64 * step)))
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let centre = best_i as f64 * step;
        let y = golden_section_max(hbar_objective, (centre - step).max(0.0), centre + step, 1e-12);
        hbar_objective(y)
    })
}

/// Golden-section search for the maximizer of a unimodal function on `[lo, hi]`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Exact GELU, `x Φ(x)` with Φ the standard normal CDF.
pub fn gelu_reference<T: Real>(x: T) -> T {
    let xf = x.to_f64().unwrap_or(f64::NAN);
    let phi = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    T::lit(xf * phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(beta: f64, c: f64) -> CtuParams<f64> {
        CtuParams::new(beta, c).unwrap()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
    }

    #[test]
    fn construction_rejects_out_of_range() {
        assert!(CtuParams::new(1.2, 0.5).is_err());
        assert!(CtuParams::new(0.5, -0.1).is_err());
        assert!(CtuParams::with_options(0.5, 0.5, -1.0, 20.0).is_err());
        assert!(CtuParams::new(f64::NAN, 0.5).is_err());
        let p = params(1.0, 1.0);
        assert!(p.eta().is_finite() && p.gamma().is_finite());
    }

    #[test]
    fn silu_eta_examples() {
        // x·logistic(x) at x = 1, computed from the definition.
        let oracle = 1.0 / (1.0 + (-1.0_f64).exp());
        assert_relative_eq!(silu_eta(1.0, 0.5, 0.0), oracle, epsilon = 1e-15);
        assert_relative_eq!(silu_eta(1.0, 0.5, 0.0), 0.7310585786, epsilon = 1e-10);
        for &x in &[-7.0, -1.0, 0.3, 4.0] {
            assert_eq!(silu_eta(x, 0.0, 1e-6), 0.5 * x);
        }
        assert!((silu_eta(10.0_f64, 1.0, 1e-6) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn softplus_gamma_examples() {
        assert_relative_eq!(
            softplus_gamma(0.0, 0.5, 0.0, 20.0),
            0.5 * 2.0_f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(softplus_gamma(100.0, 0.5, 0.0, 20.0), 100.0);
        let oracle = (1.0 + (-1.0_f64).exp()).ln();
        assert_relative_eq!(softplus_gamma(-1.0, 0.0, 0.0, 20.0), oracle, epsilon = 1e-15);
        assert_relative_eq!(oracle, 0.3132616875, epsilon = 1e-10);
    }

    #[test]
    fn ctu_examples() {
        for &c in &[0.0, 0.3, 1.0] {
            assert!((ctu(2.0, &params(1.0, c)) - 2.0).abs() < 1e-5);
        }
        let p = params(0.5, 0.5).with_eps(0.0).unwrap();
        assert_relative_eq!(ctu(0.0, &p), 0.1732867951, epsilon = 1e-10);
        let gelu1 = gelu_reference(1.0);
        assert!((ctu(1.0, &params(0.64, 1.0)) - gelu1).abs() < 0.05);
    }

    #[test]
    fn endpoints_match_branches_exactly() {
        for &x in &[-4.0, -0.2, 0.0, 0.7, 3.0, 30.0] {
            for &beta in &[0.1, 0.5, 0.9, 1.0] {
                let p1 = params(beta, 1.0);
                let p0 = params(beta, 0.0);
                assert_eq!(ctu(x, &p1), silu_eta(x, beta, DEFAULT_EPS));
                assert_eq!(ctu(x, &p0), softplus_gamma(x, beta, DEFAULT_EPS, 20.0));
            }
        }
    }

    #[test]
    fn derivative_examples() {
        assert_relative_eq!(ctu_derivative(0.0, &params(0.5, 1.0)).unwrap(), 0.5);
        assert_relative_eq!(ctu_derivative(0.0, &params(0.5, 0.0)).unwrap(), 0.5);

        let p = params(0.8, 0.5);
        let h = 1e-5;
        let fd = (ctu(3.0 + h, &p) - ctu(3.0 - h, &p)) / (2.0 * h);
        let d = ctu_derivative(3.0, &p).unwrap();
        assert!(((d - fd) / d).abs() < 1e-6, "{d} vs {fd}");
    }

    #[test]
    fn derivative_rejects_degenerate_beta() {
        assert!(ctu_derivative(1.0, &params(0.0, 0.5)).is_err());
        assert!(ctu_derivative(1.0, &params(1.0, 0.5)).is_err());
    }

    #[test]
    fn derivative_is_lemma_form_at_zero_eps() {
        let (beta, c, x) = (0.7_f64, 0.4, -1.3);
        let b = beta / (1.0 - beta);
        let s = logistic(b * x);
        let lemma = c * (s + b * x * s * (1.0 - s)) + (1.0 - c) * logistic(b * x / beta);
        let p = params(beta, c).with_eps(0.0).unwrap();
        assert_relative_eq!(ctu_derivative(x, &p).unwrap(), lemma, epsilon = 1e-15);
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let p = params(0.75, 0.3);
        for &x in &[-2.0, -0.1, 0.0, 0.4, 1.5] {
            let h = 1e-5;
            let fd = (ctu_derivative_unchecked(x + h, &p) - ctu_derivative_unchecked(x - h, &p))
                / (2.0 * h);
            assert!((ctu_second_derivative(x, &p) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn param_partials_match_finite_difference() {
        let h = 1e-6;
        for &(x, beta, c) in &[(0.7, 0.6, 0.3), (-1.2, 0.85, 0.9), (2.0, 0.3, 0.5)] {
            let (d_beta, d_c) = ctu_param_partials(x, &params(beta, c));
            let fd_beta = (ctu(x, &params(beta + h, c)) - ctu(x, &params(beta - h, c))) / (2.0 * h);
            let fd_c = (ctu(x, &params(beta, c + h)) - ctu(x, &params(beta, c - h))) / (2.0 * h);
            assert!((d_beta - fd_beta).abs() < 1e-7 * (1.0 + fd_beta.abs()));
            assert!((d_c - fd_c).abs() < 1e-8);
        }
    }

    #[test]
    fn hbar_matches_dense_grid() {
        let h = hbar_bound();
        // Independent check: a 1e-6 grid over [0, 5].
        let grid_max = (0..=5_000_000)
            .map(|i| hbar_objective(i as f64 * 1e-6))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((h - grid_max).abs() < 1e-11);
        assert!((h - 0.2239).abs() < 5e-5);
        assert!(h >= hbar_objective(1.0) && h >= hbar_objective(2.0));
        assert_relative_eq!(hbar_objective(1.0), 0.1966, epsilon = 1e-4);
        assert_relative_eq!(hbar_objective(2.0), 0.2100, epsilon = 1e-4);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_reference(0.0), 0.0);
        assert_relative_eq!(gelu_reference(1.0), 0.8413447461, epsilon = 1e-10);
        assert_relative_eq!(gelu_reference(-1.0), -0.1586552539, epsilon = 1e-10);
    }

    #[test]
    fn raw_decode_is_logistic() {
        let raw = RawCtuParams::<f64>::default();
        let p = raw.decode();
        assert_relative_eq!(p.beta(), 1.0 / (1.0 + (-1.386_f64).exp()), epsilon = 1e-15);
        assert!((p.beta() - 0.8).abs() < 1e-4);
        assert_eq!(p.c(), 0.5);
        let extreme = RawCtuParams::new(-50.0, 50.0).decode();
        assert!(extreme.beta() >= 0.0 && extreme.c() <= 1.0);
    }

    #[test]
    fn works_in_single_precision() {
        let p = CtuParams::<f32>::new(0.5, 0.5).unwrap().with_eps(0.0).unwrap();
        assert!((ctu(0.0_f32, &p) - 0.173_286_8).abs() < 1e-6);
    }
}
