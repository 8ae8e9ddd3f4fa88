//! Line-integral error `e = ∫_γ |f|` of a network along the unit circle
//! `γ(t) = (cos 2πt, sin 2πt)`: exact for ReLU networks via breakpoint
//! pullback, and by Simpson quadrature for any network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{activation_pattern, region_affine, ActivationPattern};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Real;

pub const DEFAULT_N_SCAN: usize = 4096;
pub const DEFAULT_REFINE_TOL: f64 = 1e-12;
pub const DEFAULT_N_PANELS: usize = 8192;
const FLIP_TOL: f64 = 1e-12;
/// Pattern changes tolerated inside a single scan cell before giving up.
const MAX_CHANGES_PER_CELL: usize = 64;

pub fn gamma<T: Real>(t: T) -> [T; 2] {
    let theta = T::TAU() * t;
    [theta.cos(), theta.sin()]
}

/// `h(t) = a₁ cos 2πt + a₂ sin 2πt + b0`, the region's affine map along γ.
pub fn h_along<T: Real>(a: [T; 2], b0: T, t: T) -> T {
    let [c, s] = gamma(t);
    a[0] * c + a[1] * s + b0
}

/// Antiderivative of `h`: `a₁ sin 2πt / 2π − a₂ cos 2πt / 2π + b0 t`.
pub fn antiderivative<T: Real>(a: [T; 2], b0: T, t: T) -> T {
    let [c, s] = gamma(t);
    let tau = T::TAU();
    a[0] * s / tau - a[1] * c / tau + b0 * t
}

/// Interior critical points of `h` on `(t_lo, t_hi)`, ascending.
fn critical_points<T: Real>(a: [T; 2], t_lo: T, t_hi: T) -> Vec<T> {
    if a[0] == T::zero() && a[1] == T::zero() {
        return Vec::new();
    }
    let tau = T::TAU();
    let half = T::lit(0.5);
    let base = a[1].atan2(a[0]) / tau;
    // critical points are base + k/2
    let mut k = ((t_lo - base) / half).floor();
    let mut out = Vec::new();
    loop {
        let t = base + k * half;
        if t >= t_hi {
            break;
        }
        if t > t_lo {
            out.push(t);
        }
        k = k + T::one();
    }
    out
}

fn bisect_root<T: Real>(a: [T; 2], b0: T, mut lo: T, mut hi: T, tol: T) -> T {
    let mut h_lo = h_along(a, b0, lo);
    while hi - lo > tol {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        let h_mid = h_along(a, b0, mid);
        if h_mid == T::zero() {
            return mid;
        }
        if (h_mid > T::zero()) == (h_lo > T::zero()) {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) * T::lit(0.5)
}

/// Every sign change of `h` on `(t_lo, t_hi)`, ascending. The segment is split at
/// the critical points first so each bracket is monotone.
pub fn flip_points<T: Real>(a: [T; 2], b0: T, t_lo: T, t_hi: T) -> Vec<T> {
    let mut cuts = vec![t_lo];
    cuts.extend(critical_points(a, t_lo, t_hi));
    cuts.push(t_hi);
    let tol = T::lit(FLIP_TOL);
    let mut roots = Vec::new();
    for w in cuts.windows(2) {
        let (h0, h1) = (h_along(a, b0, w[0]), h_along(a, b0, w[1]));
        if (h0 < T::zero() && h1 > T::zero()) || (h0 > T::zero() && h1 < T::zero()) {
            roots.push(bisect_root(a, b0, w[0], w[1], tol));
        }
    }
    roots
}

/// The first sign change of `h` on the segment, if any.
pub fn flip_point<T: Real>(a: [T; 2], b0: T, t_lo: T, t_hi: T) -> Option<T> {
    flip_points(a, b0, t_lo, t_hi).into_iter().next()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentError<T> {
    pub t_lo: T,
    pub t_hi: T,
    /// Sign changes of `h`; empty means `s = t_lo`.
    pub flips: Vec<T>,
    /// Signed bracket `[g]` over each piece between flips.
    pub signed_terms: Vec<T>,
    /// `∫ |h| dt` over the segment (without the 2π factor).
    pub contribution: T,
}

/// Closed-form `∫_{t_lo}^{t_hi} |h(t)| dt` given the segment's flip points.
pub fn segment_error<T: Real>(a: [T; 2], b0: T, t_lo: T, t_hi: T, flips: &[T]) -> Result<SegmentError<T>> {
    let mut cuts = vec![t_lo];
    cuts.extend(flips.iter().copied().filter(|&s| s > t_lo && s < t_hi));
    cuts.push(t_hi);
    let mut signed_terms = Vec::with_capacity(cuts.len() - 1);
    let mut contribution = T::zero();
    for w in cuts.windows(2) {
        let bracket = antiderivative(a, b0, w[1]) - antiderivative(a, b0, w[0]);
        let mid = h_along(a, b0, (w[0] + w[1]) * T::lit(0.5));
        let term = if mid < T::zero() { -bracket } else { bracket };
        if term < T::lit(-1e-12) {
            return Err(Error::NegativeContribution {
                value: term.to_f64().unwrap_or(f64::NAN),
                t_lo: w[0].to_f64().unwrap_or(f64::NAN),
                t_hi: w[1].to_f64().unwrap_or(f64::NAN),
            });
        }
        signed_terms.push(term);
        contribution = contribution + term.max(T::zero());
    }
    Ok(SegmentError {
        t_lo,
        t_hi,
        flips: flips.to_vec(),
        signed_terms,
        contribution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionAffine {
    pub a: [f64; 2],
    pub b0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSet {
    /// `0 = t₀ ≤ t₁ ≤ … ≤ 1`.
    pub knots: Vec<f64>,
    /// One affine map per segment `(t_k, t_{k+1})`.
    pub regions: Vec<RegionAffine>,
}

impl BreakpointSet {
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, RegionAffine)> + '_ {
        self.knots.windows(2).zip(&self.regions).map(|(w, r)| (w[0], w[1], *r))
    }

    /// Interior knots only.
    pub fn interior(&self) -> &[f64] {
        &self.knots[1..self.knots.len() - 1]
    }

    /// Splits segments at extra (redundant) knots, keeping each region's map.
    pub fn subdivided(&self, extra: &[f64]) -> Self {
        let mut knots = vec![self.knots[0]];
        let mut regions = Vec::new();
        for (lo, hi, r) in self.segments() {
            let mut inner: Vec<f64> = extra.iter().copied().filter(|&t| t > lo && t < hi).collect();
            inner.sort_by(f64::total_cmp);
            for t in inner {
                knots.push(t);
                regions.push(r);
            }
            knots.push(hi);
            regions.push(r);
        }
        Self { knots, regions }
    }
}

fn pattern_at(net: &Network, t: f64) -> ActivationPattern {
    activation_pattern(net, &gamma(t))
}

fn check_relu_2d(net: &Network) -> Result<()> {
    if !net.is_pure_relu() {
        return Err(Error::NotPiecewiseAffine);
    }
    if net.input_dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: net.input_dim(),
        });
    }
    Ok(())
}

/// Knots where γ crosses a ReLU region boundary, found by a uniform pattern
/// scan and bisection refinement.
pub fn pullback_breakpoints(net: &Network, n_scan: usize, refine_tol: f64) -> Result<BreakpointSet> {
    check_relu_2d(net)?;
    if n_scan == 0 || !(refine_tol > 0.0) {
        return Err(Error::InvalidParameter(format!("n_scan={n_scan}, refine_tol={refine_tol}")));
    }
    let grid: Vec<f64> = (0..=n_scan).map(|i| i as f64 / n_scan as f64).collect();
    let patterns: Vec<ActivationPattern> = grid.par_iter().map(|&t| pattern_at(net, t)).collect();
    let cell_knots = (0..n_scan)
        .into_par_iter()
        .map(|i| {
            let mut knots = Vec::new();
            if patterns[i] == patterns[i + 1] {
                return Ok(knots);
            }
            let hi = grid[i + 1];
            let mut lo = grid[i];
            let mut current = patterns[i].clone();
            while current != patterns[i + 1] {
                if knots.len() >= MAX_CHANGES_PER_CELL {
                    return Err(Error::ScanTooCoarse { t: grid[i] });
                }
                let (mut a, mut b) = (lo, hi);
                while b - a > refine_tol {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    if pattern_at(net, mid) == current {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                knots.push(0.5 * (a + b));
                lo = b;
                current = pattern_at(net, b);
            }
            Ok(knots)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut knots = vec![0.0];
    knots.extend(cell_knots.into_iter().flatten());
    knots.push(1.0);
    let regions = knots
        .windows(2)
        .map(|w| {
            let (a, b0) = region_affine(net, &gamma(0.5 * (w[0] + w[1])))?;
            Ok(RegionAffine { a: [a[0], a[1]], b0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BreakpointSet { knots, regions })
}

/// Per-segment errors over a breakpoint set.
pub fn segment_errors(set: &BreakpointSet) -> Result<Vec<SegmentError<f64>>> {
    set.segments()
        .map(|(lo, hi, r)| segment_error(r.a, r.b0, lo, hi, &flip_points(r.a, r.b0, lo, hi)))
        .collect()
}

/// `2π Σ_k contribution_k` over a breakpoint set.
pub fn total_from_breakpoints(set: &BreakpointSet) -> Result<f64> {
    Ok(std::f64::consts::TAU * segment_errors(set)?.iter().map(|s| s.contribution).sum::<f64>())
}

/// Exact circle error of a ReLU network; smooth networks are refused.
pub fn total_error_closed(net: &Network) -> Result<f64> {
    total_from_breakpoints(&pullback_breakpoints(net, DEFAULT_N_SCAN, DEFAULT_REFINE_TOL)?)
}

/// Composite Simpson of `|f(γ(t))| · 2π` over `n_panels` uniform panels.
pub fn total_error_quadrature(f: impl Fn(&[f64]) -> f64 + Sync, n_panels: usize) -> Result<f64> {
    if n_panels == 0 {
        return Err(Error::InvalidParameter("n_panels must be >= 1".into()));
    }
    let n_nodes = 2 * n_panels + 1;
    let values = (0..n_nodes)
        .into_par_iter()
        .map(|k| {
            let v = f(&gamma(k as f64 / (n_nodes - 1) as f64));
            if v.is_finite() {
                Ok(v.abs())
            } else {
                Err(Error::NonFinite { op: "total_error_quadrature" })
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let width = 1.0 / n_panels as f64;
    let sum: f64 = (0..n_panels)
        .map(|p| values[2 * p] + 4.0 * values[2 * p + 1] + values[2 * p + 2])
        .sum();
    Ok(std::f64::consts::TAU * sum * width / 6.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleReport {
    pub knots: Vec<f64>,
    /// `∫|h|` per segment, before the 2π factor.
    pub contributions: Vec<f64>,
    pub total_closed: Option<f64>,
    pub total_quadrature: f64,
    pub relative_gap: Option<f64>,
}

/// Both error forms where applicable; smooth networks get quadrature only.
pub fn circle_report(net: &Network) -> Result<CircleReport> {
    let total_quadrature = total_error_quadrature(|x| net.eval_scalar(x), DEFAULT_N_PANELS)?;
    if !net.is_pure_relu() {
        return Ok(CircleReport {
            knots: Vec::new(),
            contributions: Vec::new(),
            total_closed: None,
            total_quadrature,
            relative_gap: None,
        });
    }
    let set = pullback_breakpoints(net, DEFAULT_N_SCAN, DEFAULT_REFINE_TOL)?;
    let segs = segment_errors(&set)?;
    let contributions: Vec<f64> = segs.iter().map(|s| s.contribution).collect();
    let closed = std::f64::consts::TAU * contributions.iter().sum::<f64>();
    Ok(CircleReport {
        knots: set.knots,
        contributions,
        total_closed: Some(closed),
        total_quadrature,
        relative_gap: Some(relative_gap(closed, total_quadrature)),
    })
}

pub fn relative_gap(closed: f64, quadrature: f64) -> f64 {
    (closed - quadrature).abs() / quadrature.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mlp, MlpSpec};
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn flip_point_examples() {
        let t = flip_point([1.0, 0.0], 0.0, 0.2, 0.3).unwrap();
        assert_abs_diff_eq!(t, 0.25, epsilon = 1e-12);
        assert!(flip_point([0.3, 0.2], 1.0, 0.0, 1.0).is_none());
        let (a, b0) = ([0.7_f64, -1.3], 0.4_f64);
        for s in flip_points(a, b0, 0.0, 1.0) {
            assert!(h_along(a, b0, s).abs() <= 1e-10);
        }
        assert_eq!(flip_points(a, b0, 0.0, 1.0).len(), 2);
    }

    #[test]
    fn segment_error_examples() {
        let s = segment_error([0.0, 0.0], -1.5, 0.0, 1.0, &[]).unwrap();
        assert_abs_diff_eq!(s.contribution, 1.5, epsilon = 1e-15);
        let s = segment_error([1.0, 0.0], 0.0, 0.0, 0.5, &[0.25]).unwrap();
        assert_abs_diff_eq!(s.contribution, 1.0 / PI, epsilon = 1e-14);
        assert!(matches!(
            segment_error([1.8, 0.0], -1.31, 0.78, 1.27, &[]),
            Err(Error::NegativeContribution { .. })
        ));
    }

    #[test]
    fn generic_over_f32() {
        let t: f32 = flip_point([1.0f32, 0.0], 0.0, 0.2, 0.3).unwrap();
        assert!((t - 0.25).abs() < 1e-6);
    }

    fn set_dense(net: &mut Network, l: usize, w: Vec<f64>, b: Vec<f64>) {
        let layer = &mut net.layers_mut()[l];
        let (r, c) = (layer.fan_out(), layer.fan_in());
        layer.weight.value = Tensor::matrix(r, c, w).unwrap();
        layer.bias.value = Tensor::vector(b);
    }

    #[test]
    fn constant_and_passthrough_nets() {
        let mut net = build_mlp(&MlpSpec::relu(vec![2, 3, 1], 0)).unwrap();
        set_dense(&mut net, 0, vec![0.0; 6], vec![0.0; 3]);
        set_dense(&mut net, 1, vec![0.0; 3], vec![0.7]);
        let set = pullback_breakpoints(&net, DEFAULT_N_SCAN, DEFAULT_REFINE_TOL).unwrap();
        assert_eq!(set.knots, vec![0.0, 1.0]);
        assert_abs_diff_eq!(total_error_closed(&net).unwrap(), TAU * 0.7, epsilon = 1e-12);

        // f(x) = relu(x1) - relu(-x1) = x1
        set_dense(&mut net, 0, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0], vec![0.0; 3]);
        set_dense(&mut net, 1, vec![1.0, -1.0, 0.0], vec![0.0]);
        let set = pullback_breakpoints(&net, DEFAULT_N_SCAN, DEFAULT_REFINE_TOL).unwrap();
        assert_eq!(set.interior().len(), 2);
        assert_abs_diff_eq!(set.knots[1], 0.25, epsilon = 1e-11);
        assert_abs_diff_eq!(set.knots[2], 0.75, epsilon = 1e-11);
        assert_abs_diff_eq!(total_error_closed(&net).unwrap(), 4.0, epsilon = 1e-9);
        let q = total_error_quadrature(|x| net.eval_scalar(x), DEFAULT_N_PANELS).unwrap();
        assert_abs_diff_eq!(q, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn quadrature_of_constant() {
        let q = total_error_quadrature(|_| 1.0, DEFAULT_N_PANELS).unwrap();
        assert_abs_diff_eq!(q, TAU, epsilon = 1e-12);
    }

    #[test]
    fn zero_network_has_zero_error() {
        let mut net = build_mlp(&MlpSpec::relu(vec![2, 4, 1], 1)).unwrap();
        set_dense(&mut net, 1, vec![0.0; 4], vec![0.0]);
        assert_eq!(total_error_closed(&net).unwrap(), 0.0);
    }

    #[test]
    fn closed_refuses_smooth_nets() {
        let net = build_mlp(&MlpSpec::relu(vec![2, 4, 1], 1)).unwrap().replace_relu_shared(0.9, 0.5).unwrap();
        assert!(matches!(total_error_closed(&net), Err(Error::NotPiecewiseAffine)));
        let report = circle_report(&net).unwrap();
        assert!(report.total_closed.is_none() && report.total_quadrature.is_finite());
    }

    #[test]
    fn random_net_closed_matches_quadrature_and_subdivision() {
        let net = build_mlp(&MlpSpec::relu(vec![2, 7, 1], 9)).unwrap();
        let report = circle_report(&net).unwrap();
        assert!(report.relative_gap.unwrap() <= 1e-6, "{report:?}");
        let set = pullback_breakpoints(&net, DEFAULT_N_SCAN, DEFAULT_REFINE_TOL).unwrap();
        let finer = set.subdivided(&[0.1, 0.33, 0.5, 0.77, 0.9]);
        assert_abs_diff_eq!(
            total_from_breakpoints(&set).unwrap(),
            total_from_breakpoints(&finer).unwrap(),
            epsilon = 1e-12
        );
        let dense = pullback_breakpoints(&net, 4 * DEFAULT_N_SCAN, DEFAULT_REFINE_TOL).unwrap();
        assert_eq!(dense.knots.len(), set.knots.len());
        for (a, b) in dense.knots.iter().zip(&set.knots) {
            assert!((a - b).abs() <= 2.0 * DEFAULT_REFINE_TOL);
        }
    }
}
