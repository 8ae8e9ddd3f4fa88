//! Finite-difference curvature diagnostics, activation patterns, exact
//! region-affine maps and 2-D decision-boundary extraction.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::hbar_bound;
use crate::error::{Error, Result};
use crate::network::{ActivationSlot, Network};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const GRADIENT_STEP: f64 = 1e-5;
pub const HESSIAN_STEP: f64 = 1e-3;
const SPECTRAL_ITERS: usize = 100;
const START_SEED: u64 = 0x5EED;

fn eval_checked(f: &impl Fn(&[f64]) -> f64, x: &[f64], op: &'static str) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let fp = eval_checked(&f, &y, "fd_gradient")?;
        y[i] = x[i] - h;
        let fm = eval_checked(&f, &y, "fd_gradient")?;
        y[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Every point the FD Hessian touches: the centre, `x ± h e_i`, and `x ± h e_i ± h e_j`.
pub fn hessian_stencil(x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut pts = vec![x.to_vec()];
    for i in 0..d {
        for s in [h, -h] {
            let mut y = x.to_vec();
            y[i] += s;
            pts.push(y);
        }
        for j in i + 1..d {
            for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                let mut y = x.to_vec();
                y[i] += si;
                y[j] += sj;
                pts.push(y);
            }
        }
    }
    pts
}

/// Symmetric second-difference Hessian, row-major `d × d`.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let d = x.len();
    let f0 = eval_checked(&f, x, "fd_hessian")?;
    let mut y = x.to_vec();
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        y[i] = x[i] + h;
        let fp = eval_checked(&f, &y, "fd_hessian")?;
        y[i] = x[i] - h;
        let fm = eval_checked(&f, &y, "fd_hessian")?;
        y[i] = x[i];
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in i + 1..d {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si;
                y[j] = x[j] + sj;
                let v = eval_checked(&f, &y, "fd_hessian");
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (corner(h, h)? - corner(h, -h)? - corner(-h, h)? + corner(-h, -h)?) / (4.0 * h * h);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
    Ok(hess)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest |eigenvalue| of a symmetric `d × d` matrix by power iteration.
pub fn symmetric_spectral_norm(m: &[f64], d: usize, max_iters: usize, tol: f64) -> SpectralEstimate {
    let mut rng = SplitMix64::new(START_SEED);
    let mut v: Vec<f64> = (0..d).map(|_| rng.uniform(0.5, 1.5)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        let mut w: Vec<f64> = (0..d).map(|r| (0..d).map(|c| m[r * d + c] * v[c]).sum()).collect();
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        if (norm - prev).abs() <= tol * norm.max(1.0) {
            return SpectralEstimate {
                value: norm,
                iterations: it,
                converged: true,
            };
        }
        prev = norm;
        v = w;
    }
    SpectralEstimate {
        value: prev,
        iterations: max_iters,
        converged: false,
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power iteration on the symmetrized FD Hessian. A non-converged run still
/// carries the last iterate.
pub fn hessian_spectral_norm(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    power_iters: usize,
    tol: f64,
) -> Result<SpectralEstimate> {
    let hess = fd_hessian(f, x, h)?;
    Ok(symmetric_spectral_norm(&hess, x.len(), power_iters, tol))
}

/// `(mean ‖∇f‖^p, mean ‖∇²f‖_F^p)` over the non-excluded points; the second
/// term is 0 when `q = 1`.
pub fn sobolev_seminorm(
    f: impl Fn(&[f64]) -> f64 + Sync,
    points: &[Vec<f64>],
    q: u32,
    p: f64,
    excluded: Option<&[bool]>,
) -> Result<(f64, f64)> {
    if !(1..=2).contains(&q) || !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("sobolev order q={q}, p={p}")));
    }
    let keep: Vec<&Vec<f64>> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.is_some_and(|m| m[*i]))
        .map(|(_, x)| x)
        .collect();
    if keep.is_empty() {
        return Err(Error::AllPointsExcluded);
    }
    let terms = keep
        .par_iter()
        .map(|x| {
            let g = fd_gradient(&f, x, GRADIENT_STEP)?;
            let first = g.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p);
            let second = if q == 2 {
                let h = fd_hessian(&f, x, HESSIAN_STEP)?;
                h.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p)
            } else {
                0.0
            };
            Ok((first, second))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    Ok((
        terms.iter().map(|t| t.0).sum::<f64>() / n,
        terms.iter().map(|t| t.1).sum::<f64>() / n,
    ))
}

/// Sign bits (`z > 0`) of every hidden pre-activation, layer by layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub bits: Vec<bool>,
}

pub fn activation_pattern(net: &Network, x: &[f64]) -> ActivationPattern {
    ActivationPattern {
        bits: net.preactivations(x).into_iter().flatten().map(|z| z > 0.0).collect(),
    }
}

/// Pattern restricted to ReLU layers; empty for fully smooth networks.
fn relu_pattern(net: &Network, x: &[f64]) -> Vec<bool> {
    net.preactivations(x)
        .into_iter()
        .zip(net.slots())
        .filter(|(_, s)| matches!(s, ActivationSlot::Relu))
        .flat_map(|(z, _)| z.into_iter().map(|v| v > 0.0))
        .collect()
}

/// Whether any Hessian stencil point around `x` leaves x's ReLU region.
pub fn stencil_straddles(net: &Network, x: &[f64], h: f64) -> bool {
    let centre = relu_pattern(net, x);
    if centre.is_empty() {
        return false;
    }
    hessian_stencil(x, h).iter().skip(1).any(|y| relu_pattern(net, y) != centre)
}

/// Exact affine map `f(y) = ⟨a, y⟩ + b0` of the first output on x's region.
pub fn region_affine(net: &Network, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if !net.is_pure_relu() {
        return Err(Error::NotPiecewiseAffine);
    }
    if x.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    let d = x.len();
    let pre = net.preactivations(x);
    // Rows of `a` are the affine maps of the current layer's units.
    let mut a: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut b = vec![0.0; d];
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        let w = layer.effective_weight();
        let bias = layer.bias.value.data();
        let mut na = Vec::with_capacity(layer.fan_out());
        let mut nb = Vec::with_capacity(layer.fan_out());
        for o in 0..layer.fan_out() {
            let active = l == last || pre[l][o] > 0.0;
            let row = w.row(o);
            let mut ar = vec![0.0; d];
            let mut br = 0.0;
            if active {
                for (k, &wk) in row.iter().enumerate() {
                    for j in 0..d {
                        ar[j] += wk * a[k][j];
                    }
                    br += wk * b[k];
                }
                br += bias[o];
            }
            na.push(ar);
            nb.push(br);
        }
        a = na;
        b = nb;
    }
    Ok((a.swap_remove(0), b[0]))
}

/// Largest singular value by power iteration on `WᵀW` from a fixed start.
pub fn spectral_norm(w: &Tensor) -> f64 {
    let (rows, cols) = (w.rows(), w.cols());
    let mut rng = SplitMix64::new(START_SEED);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.uniform(0.5, 1.5)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..SPECTRAL_ITERS {
        let u: Vec<f64> = (0..rows).map(|r| w.row(r).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut next: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w.get(r, c) * u[r]).sum()).collect();
        if normalize(&mut next) == 0.0 {
            return 0.0;
        }
        v = next;
    }
    sigma
}

/// `‖W^L‖ ∏_ℓ √d_ℓ (1 + c h̄) ‖W^ℓ‖` with one c for every hidden layer.
pub fn jacobian_bound(net: &Network, c: f64) -> f64 {
    let cs = vec![c; net.slots().len()];
    bound_with(net, &cs)
}

/// Same bound using each layer's own curvature coefficient: 0 for ReLU, the
/// shared c, or the largest decoded c of a trainable layer.
pub fn network_jacobian_bound(net: &Network) -> f64 {
    let snaps = net.ct_snapshot();
    let cs: Vec<f64> = net
        .slots()
        .iter()
        .enumerate()
        .map(|(l, slot)| match slot {
            ActivationSlot::Relu => 0.0,
            _ => snaps
                .iter()
                .find(|s| s.layer == l)
                .map(|s| s.c.iter().cloned().fold(0.0, f64::max))
                .unwrap_or(1.0),
        })
        .collect();
    bound_with(net, &cs)
}

fn bound_with(net: &Network, cs: &[f64]) -> f64 {
    let hbar = hbar_bound();
    let layers = net.layers();
    let mut bound = spectral_norm(&layers[layers.len() - 1].effective_weight());
    for (l, layer) in layers[..layers.len() - 1].iter().enumerate() {
        let width = layer.fan_out() as f64;
        bound *= width.sqrt() * (1.0 + cs[l] * hbar) * spectral_norm(&layer.effective_weight());
    }
    bound
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureOptions {
    pub grad_step: f64,
    pub hessian_step: f64,
    pub power_iters: usize,
    pub tol: f64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        Self {
            grad_step: GRADIENT_STEP,
            hessian_step: HESSIAN_STEP,
            power_iters: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub points: Vec<Vec<f64>>,
    pub grad_norms: Vec<f64>,
    /// `None` where the stencil straddles a ReLU region boundary.
    pub hessian_norms: Vec<Option<f64>>,
    pub sobolev_first: f64,
    pub sobolev_second: f64,
    pub excluded: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSummary {
    pub n_points: usize,
    pub n_excluded: usize,
    pub max_grad_norm: f64,
    pub max_hessian_norm: f64,
    pub mean_hessian_norm: f64,
    pub sobolev_first: f64,
    pub sobolev_second: f64,
}

impl CurvatureReport {
    pub fn summary(&self) -> CurvatureSummary {
        let hs: Vec<f64> = self.hessian_norms.iter().flatten().copied().collect();
        CurvatureSummary {
            n_points: self.points.len(),
            n_excluded: self.excluded.iter().filter(|&&e| e).count(),
            max_grad_norm: self.grad_norms.iter().cloned().fold(0.0, f64::max),
            max_hessian_norm: hs.iter().cloned().fold(0.0, f64::max),
            mean_hessian_norm: if hs.is_empty() { 0.0 } else { hs.iter().sum::<f64>() / hs.len() as f64 },
            sobolev_first: self.sobolev_first,
            sobolev_second: self.sobolev_second,
        }
    }
}

/// Gradient and Hessian statistics of the first network output over `points`.
pub fn curvature_report(net: &Network, points: &[Vec<f64>], opts: &CurvatureOptions) -> Result<CurvatureReport> {
    let f = |x: &[f64]| net.eval_scalar(x);
    let rows = points
        .par_iter()
        .map(|x| {
            let g = fd_gradient(f, x, opts.grad_step)?;
            let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let excluded = stencil_straddles(net, x, opts.hessian_step);
            let hess = if excluded {
                None
            } else {
                Some(hessian_spectral_norm(f, x, opts.hessian_step, opts.power_iters, opts.tol)?.value)
            };
            Ok((grad_norm, hess, excluded))
        })
        .collect::<Result<Vec<_>>>()?;
    let excluded: Vec<bool> = rows.iter().map(|r| r.2).collect();
    let (sobolev_first, sobolev_second) = sobolev_seminorm(f, points, 2, 2.0, Some(&excluded))?;
    Ok(CurvatureReport {
        points: points.to_vec(),
        grad_norms: rows.iter().map(|r| r.0).collect(),
        hessian_norms: rows.iter().map(|r| r.1).collect(),
        sobolev_first,
        sobolev_second,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl BBox {
    pub fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Result<Self> {
        let ok = [x_lo, x_hi, y_lo, y_hi].iter().all(|v| v.is_finite()) && x_hi > x_lo && y_hi > y_lo;
        if ok {
            Ok(Self { x_lo, x_hi, y_lo, y_hi })
        } else {
            Err(Error::DegenerateBbox)
        }
    }

    pub fn square(half: f64) -> Result<Self> {
        Self::new(-half, half, -half, half)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    /// The last vertex connects back to the first.
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum EdgeId {
    /// Between nodes (i, j) and (i + 1, j).
    H(usize, usize),
    /// Between nodes (i, j) and (i, j + 1).
    V(usize, usize),
}

/// Marching-squares zero contour of `f` on a `resolution × resolution` cell grid.
pub fn decision_boundary_2d(f: impl Fn(&[f64]) -> f64 + Sync, bbox: &BBox, resolution: usize) -> Result<Vec<Polyline>> {
    BBox::new(bbox.x_lo, bbox.x_hi, bbox.y_lo, bbox.y_hi)?;
    if resolution == 0 {
        return Err(Error::InvalidParameter("resolution must be >= 1".into()));
    }
    let n = resolution + 1;
    let dx = (bbox.x_hi - bbox.x_lo) / resolution as f64;
    let dy = (bbox.y_hi - bbox.y_lo) / resolution as f64;
    let node = |i: usize, j: usize| [bbox.x_lo + i as f64 * dx, bbox.y_lo + j as f64 * dy];
    let values = (0..n * n)
        .into_par_iter()
        .map(|k| eval_checked(&f, &node(k % n, k / n), "decision_boundary_2d"))
        .collect::<Result<Vec<f64>>>()?;
    let val = |i: usize, j: usize| values[j * n + i];
    let pos = |v: f64| v >= 0.0;

    let mut vertex: HashMap<EdgeId, [f64; 2]> = HashMap::new();
    let mut crossing = |e: EdgeId| -> [f64; 2] {
        *vertex.entry(e).or_insert_with(|| {
            let (p0, p1, v0, v1) = match e {
                EdgeId::H(i, j) => (node(i, j), node(i + 1, j), val(i, j), val(i + 1, j)),
                EdgeId::V(i, j) => (node(i, j), node(i, j + 1), val(i, j), val(i, j + 1)),
            };
            let t = v0 / (v0 - v1);
            [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
        })
    };

    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for j in 0..resolution {
        for i in 0..resolution {
            let corners = [val(i, j), val(i + 1, j), val(i + 1, j + 1), val(i, j + 1)];
            let edges = [EdgeId::H(i, j), EdgeId::V(i + 1, j), EdgeId::H(i, j + 1), EdgeId::V(i, j)];
            let crossed: Vec<EdgeId> = (0..4)
                .filter(|&k| pos(corners[k]) != pos(corners[(k + 1) % 4]))
                .map(|k| edges[k])
                .collect();
            match crossed.len() {
                2 => segments.push((crossed[0], crossed[1])),
                4 => {
                    let centre = corners.iter().sum::<f64>() / 4.0;
                    if pos(centre) == pos(corners[0]) {
                        // bottom-left and top-right joined: cut off the other two corners
                        segments.push((edges[0], edges[1]));
                        segments.push((edges[2], edges[3]));
                    } else {
                        segments.push((edges[3], edges[0]));
                        segments.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }
    for &(a, b) in &segments {
        crossing(a);
        crossing(b);
    }

    let mut incident: HashMap<EdgeId, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        incident.entry(a).or_default().push(s);
        incident.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let walk = |start: EdgeId, from_seg: usize, used: &mut Vec<bool>| -> (Vec<EdgeId>, bool) {
        let mut chain = vec![start];
        let mut seg = from_seg;
        let mut at = start;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            if next == chain[0] {
                return (chain, true);
            }
            chain.push(next);
            at = next;
            match incident[&next].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => return (chain, false),
            }
        }
    };

    let mut lines = Vec::new();
    // Open chains start at an endpoint of degree one.
    for s in 0..segments.len() {
        if used[s] {
            continue;
        }
        let (a, b) = segments[s];
        let start = if incident[&a].len() == 1 {
            Some(a)
        } else if incident[&b].len() == 1 {
            Some(b)
        } else {
            None
        };
        if let Some(start) = start {
            let (chain, closed) = walk(start, s, &mut used);
            lines.push((chain, closed));
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            let (chain, closed) = walk(segments[s].0, s, &mut used);
            lines.push((chain, closed));
        }
    }
    Ok(lines
        .into_iter()
        .map(|(chain, closed)| Polyline {
            points: chain.iter().map(|e| vertex[e]).collect(),
            closed,
        })
        .collect())
}

/// Sum of absolute turning angles along a polyline, skipping zero-length steps.
pub fn turning_angle_sum(line: &Polyline) -> f64 {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(line.points.len());
    for &p in &line.points {
        if pts.last().map_or(true, |q: &[f64; 2]| q[0] != p[0] || q[1] != p[1]) {
            pts.push(p);
        }
    }
    if line.closed && pts.len() > 1 && pts[0] == pts[pts.len() - 1] {
        pts.pop();
    }
    let m = pts.len();
    if m < 3 {
        return 0.0;
    }
    let dir = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
    let turn = |a, b, c| {
        let mut d = dir(b, c) - dir(a, b);
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        d.abs()
    };
    let mut total: f64 = (1..m - 1).map(|k| turn(pts[k - 1], pts[k], pts[k + 1])).sum();
    if line.closed {
        total += turn(pts[m - 2], pts[m - 1], pts[0]) + turn(pts[m - 1], pts[0], pts[1]);
    }
    total
}

/// Total turning over every polyline of a contour.
pub fn contour_turning(lines: &[Polyline]) -> f64 {
    lines.iter().map(turning_angle_sum).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mlp, MlpSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|x| 3.0 * x[0] - 2.0 * x[1] + 0.5, &[0.3, -0.7], GRADIENT_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], -2.0, epsilon = 1e-9);
        let g = fd_gradient(|x| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], GRADIENT_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-6);
        assert!(fd_gradient(|_| f64::NAN, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn hessian_examples() {
        let affine = hessian_spectral_norm(|x| 2.0 * x[0] - x[1], &[0.1, 0.2], HESSIAN_STEP, 50, 1e-8).unwrap();
        assert!(affine.value <= 1e-6);
        let quad = hessian_spectral_norm(|x| x[0] * x[0] + x[1] * x[1], &[0.4, -1.0], HESSIAN_STEP, 50, 1e-8).unwrap();
        assert_abs_diff_eq!(quad.value, 2.0, epsilon = 1e-4);
        let saddle = hessian_spectral_norm(|x| x[0] * x[1] + 0.5 * x[0] * x[0], &[0.0, 0.0], HESSIAN_STEP, 200, 1e-12).unwrap();
        // eigenvalues of [[1,1],[1,0]] are (1 ± √5)/2
        assert_abs_diff_eq!(saddle.value, (1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-5);
    }

    #[test]
    fn sobolev_examples() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05]).collect();
        let (a, b) = sobolev_seminorm(|_| 4.0, &pts, 2, 2.0, None).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let (a, b) = sobolev_seminorm(|x| 3.0 * x[0] + 4.0 * x[1], &pts, 2, 2.0, None).unwrap();
        assert_abs_diff_eq!(a, 25.0, epsilon = 1e-6);
        assert!(b < 1e-6);
        let mask = vec![true; pts.len()];
        assert!(matches!(
            sobolev_seminorm(|_| 0.0, &pts, 2, 2.0, Some(&mask)),
            Err(Error::AllPointsExcluded)
        ));
    }

    #[test]
    fn region_affine_matches_network_and_autodiff() {
        let net = build_mlp(&MlpSpec::relu(vec![2, 9, 5, 1], 11)).unwrap();
        let mut rng = SplitMix64::new(4);
        for _ in 0..50 {
            let x = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            let (a, b0) = region_affine(&net, &x).unwrap();
            let f = net.eval_scalar(&x);
            assert!((a[0] * x[0] + a[1] * x[1] + b0 - f).abs() <= 1e-12 * f.abs().max(1.0));
            let g = net.input_gradient(&x).unwrap();
            assert!((g[0] - a[0]).abs() <= 1e-10 && (g[1] - a[1]).abs() <= 1e-10);
        }
        let smooth = net.replace_relu_shared(0.9, 0.5).unwrap();
        assert!(matches!(region_affine(&smooth, &[0.0, 0.0]), Err(Error::NotPiecewiseAffine)));
    }

    #[test]
    fn equal_patterns_share_affine_map() {
        let net = build_mlp(&MlpSpec::relu(vec![2, 6, 1], 2)).unwrap();
        let x = [0.3, 0.2];
        let y = [0.3 + 1e-7, 0.2 - 1e-7];
        assert_eq!(activation_pattern(&net, &x), activation_pattern(&net, &y));
        assert_eq!(region_affine(&net, &x).unwrap(), region_affine(&net, &y).unwrap());
        assert_eq!(activation_pattern(&net, &x).bits.len(), 6);
    }

    #[test]
    fn jacobian_bound_properties() {
        let single = build_mlp(&MlpSpec::relu(vec![3, 2], 5)).unwrap();
        let w = &single.layers()[0].weight.value;
        assert_abs_diff_eq!(jacobian_bound(&single, 0.7), spectral_norm(w), epsilon = 0.0);
        let net = build_mlp(&MlpSpec::relu(vec![2, 8, 8, 1], 5)).unwrap();
        let mut prev = 0.0;
        for c in [0.0, 0.25, 0.5, 1.0] {
            let b = jacobian_bound(&net, c);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn spectral_norm_diagonal() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, -5.0]).unwrap();
        assert_abs_diff_eq!(spectral_norm(&w), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn boundary_of_vertical_line() {
        let lines = decision_boundary_2d(|x| x[0], &BBox::square(1.0).unwrap(), 41).unwrap();
        assert_eq!(lines.len(), 1);
        assert!(!lines[0].closed);
        assert!(lines[0].points.iter().all(|p| p[0].abs() < 1e-12));
        assert!(contour_turning(&lines) < 1e-9);
    }

    #[test]
    fn boundary_of_unit_circle() {
        let res = 200;
        let lines = decision_boundary_2d(|x| x[0] * x[0] + x[1] * x[1] - 1.0, &BBox::square(1.5).unwrap(), res).unwrap();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].closed);
        for p in &lines[0].points {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() <= 2.0 / res as f64);
        }
        assert_abs_diff_eq!(contour_turning(&lines), 2.0 * std::f64::consts::PI, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_bbox_rejected() {
        assert!(matches!(BBox::new(0.0, 0.0, -1.0, 1.0), Err(Error::DegenerateBbox)));
    }
}
