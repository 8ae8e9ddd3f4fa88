//! Max-affine splines and their smoothed evaluations.
//!
//! A max-affine spline (MAS) with `R` affine pieces over `D` inputs evaluates
//! `max_r ⟨A_r, x⟩ + b_r`. Region selection can be done hard (argmax), soft
//! (entropy-regularized, a softmax at temperature `(1-β)/β`) or by replacing
//! the max with a log-sum-exp at temperature `1-β`. ReLU is the 2-piece MAS
//! `A = [[0], [1]]`, `b = [0, 0]`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Simplex membership tolerance for externally supplied selection vectors.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MaxAffineSpline<T> {
    slopes: Vec<T>,
    offsets: Vec<T>,
    dim: usize,
}

impl<T: Real> MaxAffineSpline<T> {
    /// `slopes` holds one row of length `D` per piece.
    pub fn new(slopes: Vec<Vec<T>>, offsets: Vec<T>) -> Result<Self> {
        let pieces = slopes.len();
        if pieces == 0 {
            return Err(Error::InvalidParameter("spline needs at least one piece".into()));
        }
        if offsets.len() != pieces {
            return Err(Error::DimensionMismatch {
                expected: pieces,
                got: offsets.len(),
            });
        }
        let dim = slopes[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("spline input dimension is zero".into()));
        }
        let mut flat = Vec::with_capacity(pieces * dim);
        for row in &slopes {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("spline entries must be finite".into()));
        }
        Ok(Self {
            slopes: flat,
            offsets,
            dim,
        })
    }

    /// ReLU as a two-piece spline.
    pub fn relu() -> Self {
        Self::new(vec![vec![T::zero()], vec![T::one()]], vec![T::zero(), T::zero()])
            .expect("relu spline is valid")
    }

    pub fn pieces(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slope(&self, r: usize) -> &[T] {
        &self.slopes[r * self.dim..(r + 1) * self.dim]
    }

    pub fn offset(&self, r: usize) -> T {
        self.offsets[r]
    }

    /// Per-piece affine outputs `z_r = ⟨A_r, x⟩ + b_r`.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok((0..self.pieces())
            .map(|r| {
                self.slope(r)
                    .iter()
                    .zip(x)
                    .fold(self.offsets[r], |acc, (&a, &xi)| acc + a * xi)
            })
            .collect())
    }
}

/// A point on the probability simplex selecting (softly) among spline pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionVector<T> {
    weights: Vec<T>,
}

impl<T: Real> SelectionVector<T> {
    /// Validates simplex membership within `1e-9`.
    pub fn new(weights: Vec<T>) -> Result<Self> {
        let sum = weights.iter().fold(T::zero(), |a, &w| a + w);
        let min = weights.iter().fold(T::infinity(), |a, &w| a.min(w));
        let tol = T::lit(SIMPLEX_TOL);
        if weights.is_empty() || min < -tol || (sum - T::one()).abs() > tol || !sum.is_finite() {
            return Err(Error::OffSimplex {
                sum: sum.to_f64().unwrap_or(f64::NAN),
                min: min.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { weights })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut weights = vec![T::zero(); len];
        weights[index] = T::one();
        Self { weights }
    }

    pub fn uniform(len: usize) -> Self {
        let w = T::one() / T::from_usize(len).expect("length fits scalar");
        Self {
            weights: vec![w; len],
        }
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Shannon entropy `-Σ t_r ln t_r` with `0 ln 0 = 0`.
    pub fn entropy(&self) -> T {
        entropy(&self.weights)
    }
}

pub fn entropy<T: Real>(t: &[T]) -> T {
    t.iter()
        .filter(|&&w| w > T::zero())
        .fold(T::zero(), |acc, &w| acc - w * w.ln())
}

pub fn mas_eval<T: Real>(s: &MaxAffineSpline<T>, x: &[T]) -> Result<T> {
    let z = s.logits(x)?;
    Ok(z.into_iter().fold(T::neg_infinity(), T::max))
}

/// One-hot at the maximizing piece; ties go to the lowest index.
pub fn hard_select<T: Real>(s: &MaxAffineSpline<T>, x: &[T]) -> Result<SelectionVector<T>> {
    let z = s.logits(x)?;
    Ok(SelectionVector::one_hot(z.len(), argmax_lowest(&z)))
}

fn argmax_lowest<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `Σ_r t_r (⟨A_r, x⟩ + b_r)`.
pub fn affine_compute<T: Real>(
    s: &MaxAffineSpline<T>,
    x: &[T],
    t: &SelectionVector<T>,
) -> Result<T> {
    let z = s.logits(x)?;
    if t.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: t.len(),
        });
    }
    // Re-validate in case the caller built the vector through one_hot/uniform.
    SelectionVector::new(t.weights.clone())?;
    Ok(z.iter()
        .zip(t.weights())
        .fold(T::zero(), |acc, (&zr, &tr)| acc + zr * tr))
}

/// Closed-form maximizer of the entropy-regularized selection problem:
/// `t_r ∝ exp(β z_r / (1 - β))`. β = 1 is the hard selection, β = 0 uniform.
pub fn soft_select<T: Real>(
    s: &MaxAffineSpline<T>,
    x: &[T],
    beta: T,
) -> Result<SelectionVector<T>> {
    let z = s.logits(x)?;
    if beta >= T::one() {
        return Ok(SelectionVector::one_hot(z.len(), argmax_lowest(&z)));
    }
    if beta <= T::zero() {
        return Ok(SelectionVector::uniform(z.len()));
    }
    let inv_temp = beta / (T::one() - beta);
    Ok(SelectionVector {
        weights: softmax(&z, inv_temp),
    })
}

fn softmax<T: Real>(z: &[T], inv_temp: T) -> Vec<T> {
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| ((v - zmax) * inv_temp).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &e| a + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// `β Σ t_r z_r + (1 - β) H(t)`.
pub fn vq_objective<T: Real>(
    s: &MaxAffineSpline<T>,
    x: &[T],
    t: &SelectionVector<T>,
    beta: T,
) -> Result<T> {
    let z = s.logits(x)?;
    if t.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: t.len(),
        });
    }
    let linear = z
        .iter()
        .zip(t.weights())
        .fold(T::zero(), |acc, (&zr, &tr)| acc + zr * tr);
    Ok(beta * linear + (T::one() - beta) * t.entropy())
}

/// `(1 - β) ln Σ_r exp(z_r / (1 - β))`; β ≥ 1 returns the plain max.
pub fn lse_smooth<T: Real>(s: &MaxAffineSpline<T>, x: &[T], beta: T) -> Result<T> {
    let z = s.logits(x)?;
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let temp = T::one() - beta;
    if temp <= T::zero() {
        return Ok(zmax);
    }
    let sum = z
        .iter()
        .fold(T::zero(), |acc, &v| acc + ((v - zmax) / temp).exp());
    Ok(zmax + temp * sum.ln())
}

/// `c · soft-VQ output + (1 - c) · LSE output`; on the ReLU spline this is the CTU.
pub fn blended_eval<T: Real>(s: &MaxAffineSpline<T>, x: &[T], beta: T, c: T) -> Result<T> {
    let t = soft_select(s, x, beta)?;
    let soft = affine_compute(s, x, &t)?;
    let lse = lse_smooth(s, x, beta)?;
    Ok(c * soft + (T::one() - c) * lse)
}
