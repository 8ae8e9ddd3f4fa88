//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive records its output value and the indices of its inputs;
//! [`Tape::backward`] walks the record in exact reverse order. Leaves bound
//! from frozen [`Parameter`]s do not request gradients, so no gradient is ever
//! computed for them.
//!
//! Shapes follow the batch-major convention: activations are `N × width`,
//! dense weights are `out × in`, biases are vectors of length `out`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{ctu, ctu_derivative_unchecked, ctu_param_partials, CtuParams};
use crate::error::{Error, Result};
use crate::scalar::{log1p_exp, logistic};
use crate::tensor::Tensor;

/// Work size above which dense kernels fan out across threads. Each output
/// element is still reduced sequentially, so results do not depend on the
/// thread count.
const PAR_THRESHOLD: usize = 1 << 15;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Where an elementwise CTU takes its (β, c) from.
#[derive(Debug, Clone, Copy)]
pub enum CtuSource {
    /// One frozen pair shared by every element.
    Fixed(CtuParams<f64>),
    /// Per-column raw parameters (vectors of length `width`), decoded through
    /// the logistic function.
    Raw {
        raw_beta: Var,
        raw_coeff: Var,
        eps: f64,
        threshold: f64,
    },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Ctu { x: Var, source: CtuSource },
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Tensor },
    Bce { logits: Var, labels: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the record so the tape can be reused for another pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Binds a parameter; only trainable parameters request a gradient.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.leaf(p.value.clone(), p.trainable)
    }

    /// `x Wᵀ + b` with `x: N × in`, `W: out × in`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, fan_in, fan_out) = (xv.rows(), xv.cols(), wv.rows());
        let bias = match b {
            Some(bv) => {
                let t = self.value(bv);
                if t.shape() != [fan_out] {
                    return Err(Error::ShapeMismatch {
                        op: "affine",
                        lhs: vec![fan_out],
                        rhs: t.shape().to_vec(),
                    });
                }
                Some(t.data())
            }
            None => None,
        };
        let mut out = vec![0.0; n * fan_out];
        let row_kernel = |(i, row): (usize, &mut [f64])| {
            let xr = &xv.data()[i * fan_in..(i + 1) * fan_in];
            for (o, slot) in row.iter_mut().enumerate() {
                let wr = &wv.data()[o * fan_in..(o + 1) * fan_in];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                *slot = dot + bias.map_or(0.0, |bb| bb[o]);
            }
        };
        if n * fan_in * fan_out >= PAR_THRESHOLD {
            out.par_chunks_mut(fan_out).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(fan_out).enumerate().for_each(row_kernel);
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|bv| self.needs(bv));
        self.push(Tensor::matrix(n, fan_out, out)?, Op::Affine { x, w, b }, rg, "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    /// Elementwise CTU over an `N × width` tensor.
    pub fn ctu(&mut self, x: Var, source: CtuSource) -> Result<Var> {
        let xv = self.value(x);
        let out = match source {
            CtuSource::Fixed(p) => xv.map(|v| ctu(v, &p)),
            CtuSource::Raw {
                raw_beta,
                raw_coeff,
                eps,
                threshold,
            } => {
                let params = self.decode_columns(x, raw_beta, raw_coeff, eps, threshold)?;
                let width = params.len();
                let data = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| ctu(v, &params[k % width]))
                    .collect();
                Tensor::new(xv.shape().to_vec(), data)?
            }
        };
        let rg = self.needs(x)
            || matches!(source, CtuSource::Raw { raw_beta, raw_coeff, .. }
                if self.needs(raw_beta) || self.needs(raw_coeff));
        self.push(out, Op::Ctu { x, source }, rg, "ctu")
    }

    fn decode_columns(
        &self,
        x: Var,
        raw_beta: Var,
        raw_coeff: Var,
        eps: f64,
        threshold: f64,
    ) -> Result<Vec<CtuParams<f64>>> {
        let width = self.value(x).cols();
        let rb = self.value(raw_beta);
        let rc = self.value(raw_coeff);
        if rb.shape() != [width] || rc.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "ctu",
                lhs: vec![width],
                rhs: rb.shape().to_vec(),
            });
        }
        Ok(rb
            .data()
            .iter()
            .zip(rc.data())
            .map(|(&b, &c)| {
                crate::activation::RawCtuParams::new(b, c).decode_with(eps, threshold)
            })
            .collect())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(logistic);
        let rg = self.needs(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, k), rg, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Mean squared error; `target` must match `pred` element count.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        check_len("mse_loss", pv, target)?;
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
            "mse_loss",
        )
    }

    /// Mean binary cross-entropy on logits, `mean(softplus(z) - y z)`.
    pub fn bce_with_logits_loss(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let zv = self.value(logits);
        check_len("bce_with_logits_loss", zv, labels)?;
        let n = zv.len() as f64;
        let loss = zv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| log1p_exp(z) - y * z)
            .sum::<f64>()
            / n;
        let rg = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.clone(),
            },
            rg,
            "bce_with_logits_loss",
        )
    }

    /// Propagates `d loss / d node` to every node that requested a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g)?;
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (dx, dw, db) = self.affine_backward(x, w, b, g);
                if let Some(dx) = dx {
                    self.accumulate(x, dx)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(w, dw)?;
                }
                if let (Some(bv), Some(db)) = (b, db) {
                    self.accumulate(bv, db)?;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                let dx = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, dx)?;
            }
            Op::Ctu { x, source } => self.ctu_backward(x, source, g)?,
            Op::Sigmoid(x) => {
                let out = &self.nodes[idx].value;
                let data = out.data().iter().zip(g.data()).map(|(&s, &gi)| gi * s * (1.0 - s)).collect();
                let dx = Tensor::new(out.shape().to_vec(), data)?;
                self.accumulate(x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(gi, x)| gi * x).collect();
                let shape = av.shape().to_vec();
                self.accumulate(a, Tensor::new(shape.clone(), da)?)?;
                self.accumulate(b, Tensor::new(shape, db)?)?;
            }
            Op::Scale(x, k) => self.accumulate(x, g.map(|v| v * k))?,
            Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let shape = xv.shape().to_vec();
                let k = g.data()[0] / xv.len() as f64;
                self.accumulate(x, Tensor::filled(&shape, k))?;
            }
            Op::Mse { pred, target } => {
                let pv = self.value(pred);
                let k = 2.0 * g.data()[0] / pv.len() as f64;
                let data = pv.data().iter().zip(target.data()).map(|(p, t)| k * (p - t)).collect();
                let d = Tensor::new(pv.shape().to_vec(), data)?;
                self.accumulate(pred, d)?;
            }
            Op::Bce { logits, labels } => {
                let zv = self.value(logits);
                let k = g.data()[0] / zv.len() as f64;
                let data = zv
                    .data()
                    .iter()
                    .zip(labels.data())
                    .map(|(&z, &y)| k * (logistic(z) - y))
                    .collect();
                let d = Tensor::new(zv.shape().to_vec(), data)?;
                self.accumulate(logits, d)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn affine_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor,
    ) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fan_in, fan_out) = (xv.rows(), xv.cols(), wv.rows());
        let parallel = n * fan_in * fan_out >= PAR_THRESHOLD;
        let gd = g.data();

        let dx = self.needs(x).then(|| {
            let mut dx = vec![0.0; n * fan_in];
            let kernel = |(i, row): (usize, &mut [f64])| {
                for o in 0..fan_out {
                    let gi = gd[i * fan_out + o];
                    if gi != 0.0 {
                        let wr = &wv.data()[o * fan_in..(o + 1) * fan_in];
                        for (d, &wv) in row.iter_mut().zip(wr) {
                            *d += gi * wv;
                        }
                    }
                }
            };
            if parallel {
                dx.par_chunks_mut(fan_in).enumerate().for_each(kernel);
            } else {
                dx.chunks_mut(fan_in).enumerate().for_each(kernel);
            }
            Tensor::matrix(n, fan_in, dx).expect("shape")
        });

        let dw = self.needs(w).then(|| {
            let mut dw = vec![0.0; fan_out * fan_in];
            let kernel = |(o, row): (usize, &mut [f64])| {
                for i in 0..n {
                    let gi = gd[i * fan_out + o];
                    if gi != 0.0 {
                        let xr = &xv.data()[i * fan_in..(i + 1) * fan_in];
                        for (d, &xv) in row.iter_mut().zip(xr) {
                            *d += gi * xv;
                        }
                    }
                }
            };
            if parallel {
                dw.par_chunks_mut(fan_in).enumerate().for_each(kernel);
            } else {
                dw.chunks_mut(fan_in).enumerate().for_each(kernel);
            }
            Tensor::matrix(fan_out, fan_in, dw).expect("shape")
        });

        let db = b.filter(|&bv| self.needs(bv)).map(|_| {
            let mut db = vec![0.0; fan_out];
            for i in 0..n {
                for (d, &gi) in db.iter_mut().zip(&gd[i * fan_out..(i + 1) * fan_out]) {
                    *d += gi;
                }
            }
            Tensor::vector(db)
        });
        (dx, dw, db)
    }

    fn ctu_backward(&mut self, x: Var, source: CtuSource, g: &Tensor) -> Result<()> {
        let xv = self.value(x).clone();
        match source {
            CtuSource::Fixed(p) => {
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| gi * ctu_derivative_unchecked(v, &p))
                    .collect();
                self.accumulate(x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            CtuSource::Raw {
                raw_beta,
                raw_coeff,
                eps,
                threshold,
            } => {
                let params = self.decode_columns(x, raw_beta, raw_coeff, eps, threshold)?;
                let width = params.len();
                let mut dx = Vec::with_capacity(xv.len());
                let mut d_rb = vec![0.0; width];
                let mut d_rc = vec![0.0; width];
                for (k, (&v, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
                    let col = k % width;
                    let p = &params[col];
                    dx.push(gi * ctu_derivative_unchecked(v, p));
                    let (d_beta, d_c) = ctu_param_partials(v, p);
                    d_rb[col] += gi * d_beta;
                    d_rc[col] += gi * d_c;
                }
                // Chain through the logistic decode: dσ/dr = σ (1 - σ).
                for (col, p) in params.iter().enumerate() {
                    d_rb[col] *= p.beta() * (1.0 - p.beta());
                    d_rc[col] *= p.c() * (1.0 - p.c());
                }
                self.accumulate(x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                self.accumulate(raw_beta, Tensor::vector(d_rb))?;
                self.accumulate(raw_coeff, Tensor::vector(d_rc))?;
            }
        }
        Ok(())
    }
}

fn check_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Adam first/second moments and step count for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// A trainable tensor with its gradient buffer and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub adam: AdamState,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            value,
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds the tape gradient of `var` (if any) into `grad`.
    pub fn accumulate_from(&mut self, tape: &Tape, var: Var) -> Result<()> {
        if !self.trainable {
            return Ok(());
        }
        if let Some(g) = tape.grad(var) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Drops optimizer history (used when a parameter changes role between phases).
    pub fn reset_optimizer(&mut self) {
        let zeros = Tensor::zeros(self.value.shape());
        self.adam = AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on every trainable parameter.
pub fn adam_step(params: &mut [&mut Parameter], lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate {lr} must be > 0")));
    }
    for p in params.iter_mut().filter(|p| p.trainable) {
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let grads = p.grad.data().to_vec();
        let m = p.adam.m.data_mut();
        for (mi, &g) in m.iter_mut().zip(&grads) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        }
        let v = p.adam.v.data_mut();
        for (vi, &g) in v.iter_mut().zip(&grads) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        }
        let m = p.adam.m.data().to_vec();
        let v = p.adam.v.data().to_vec();
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(&m).zip(&v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ctu_derivative;
    use approx::assert_relative_eq;

    #[test]
    fn square_via_mul() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]), true).unwrap();
        let sx = tape.scale(x, 1.0).unwrap();
        let sq = tape.mul(sx, x).unwrap();
        let y = tape.sum(sq).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn bce_at_zero_logit() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 1, vec![0.0]).unwrap(), true).unwrap();
        let l = tape.bce_with_logits_loss(z, &Tensor::vector(vec![1.0])).unwrap();
        assert_relative_eq!(tape.value(l).data()[0], 2.0_f64.ln(), epsilon = 1e-15);
        tape.backward(l).unwrap();
        assert_relative_eq!(tape.grad(z).unwrap().data()[0], -0.5);
    }

    #[test]
    fn ctu_backward_matches_closed_form() {
        let p = CtuParams::new(0.7, 0.35).unwrap();
        let xs = vec![-3.0, -0.4, 0.0, 0.9, 2.5, 11.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, xs.clone()).unwrap(), true).unwrap();
        let y = tape.ctu(x, CtuSource::Fixed(p)).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        for (g, &xi) in tape.grad(x).unwrap().data().iter().zip(&xs) {
            assert!((g - ctu_derivative(xi, &p).unwrap()).abs() <= 1e-10);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
        tape.reset();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e308]), true).unwrap();
        match tape.scale(x, 10.0) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let b = tape.leaf(Tensor::vector(vec![1.0]), true).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert!(tape.affine(x, w, None).is_err());
    }

    #[test]
    fn affine_mse_matches_normal_equations() {
        // loss = |Xwᵀ + b - y|² / N  =>  dL/dw = 2/N (Xᵀ(Xwᵀ + b - y))ᵀ, dL/db = 2/N Σ r.
        let xs = vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let ys = vec![0.3, -1.0, 2.0];
        let w0 = vec![0.7, -0.2];
        let b0 = 0.1;
        let residual: Vec<f64> = (0..3)
            .map(|i| xs[2 * i] * w0[0] + xs[2 * i + 1] * w0[1] + b0 - ys[i])
            .collect();
        let expect_w: Vec<f64> = (0..2)
            .map(|j| 2.0 / 3.0 * (0..3).map(|i| xs[2 * i + j] * residual[i]).sum::<f64>())
            .collect();
        let expect_b = 2.0 / 3.0 * residual.iter().sum::<f64>();

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, xs).unwrap()).unwrap();
        let w = tape.leaf(Tensor::matrix(1, 2, w0).unwrap(), true).unwrap();
        let b = tape.leaf(Tensor::vector(vec![b0]), true).unwrap();
        let out = tape.affine(x, w, Some(b)).unwrap();
        let l = tape.mse_loss(out, &Tensor::vector(ys)).unwrap();
        tape.backward(l).unwrap();
        for (g, e) in tape.grad(w).unwrap().data().iter().zip(&expect_w) {
            assert_relative_eq!(*g, *e, epsilon = 1e-14);
        }
        assert_relative_eq!(tape.grad(b).unwrap().data()[0], expect_b, epsilon = 1e-14);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn frozen_parameter_gets_no_grad() {
        let mut frozen = Parameter::new(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap()).unwrap();
        let w = tape.param(&frozen).unwrap();
        let y = tape.affine(x, w, None).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        frozen.accumulate_from(&tape, w).unwrap();
        assert!(frozen.grad.data().iter().all(|&g| g == 0.0));
    }

    fn raw_ctu_loss(rb: f64, rc: f64, xs: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap()).unwrap();
        let b = tape.leaf(Tensor::vector(vec![rb]), true).unwrap();
        let c = tape.leaf(Tensor::vector(vec![rc]), true).unwrap();
        let y = tape
            .ctu(x, CtuSource::Raw { raw_beta: b, raw_coeff: c, eps: 1e-6, threshold: 20.0 })
            .unwrap();
        let s = tape.sum(y).unwrap();
        tape.value(s).data()[0]
    }

    #[test]
    fn raw_beta_gradient_matches_finite_difference() {
        let xs = [-1.5, -0.2, 0.4, 1.1, 2.7];
        let (rb, rc) = (0.9, -0.3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(5, 1, xs.to_vec()).unwrap()).unwrap();
        let b = tape.leaf(Tensor::vector(vec![rb]), true).unwrap();
        let c = tape.leaf(Tensor::vector(vec![rc]), true).unwrap();
        let y = tape
            .ctu(x, CtuSource::Raw { raw_beta: b, raw_coeff: c, eps: 1e-6, threshold: 20.0 })
            .unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let h = 1e-5;
        let fd_b = (raw_ctu_loss(rb + h, rc, &xs) - raw_ctu_loss(rb - h, rc, &xs)) / (2.0 * h);
        let fd_c = (raw_ctu_loss(rb, rc + h, &xs) - raw_ctu_loss(rb, rc - h, &xs)) / (2.0 * h);
        let gb = tape.grad(b).unwrap().data()[0];
        let gc = tape.grad(c).unwrap().data()[0];
        assert!(((gb - fd_b) / fd_b).abs() < 1e-4, "{gb} vs {fd_b}");
        assert!(((gc - fd_c) / fd_c).abs() < 1e-4, "{gc} vs {fd_c}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Parameter::new(Tensor::vector(vec![1.0, -2.0, 0.5]), true);
        p.grad = Tensor::vector(vec![0.3, -5.0, 0.0]);
        let lr = 0.01;
        adam_step(&mut [&mut p], lr, &AdamConfig::default()).unwrap();
        assert!((p.value.data()[0] - (1.0 - lr)).abs() < 1e-9);
        assert!((p.value.data()[1] - (-2.0 + lr)).abs() < 1e-9);
        assert_eq!(p.value.data()[2], 0.5);
        assert_eq!(p.adam.step, 1);
        assert!(adam_step(&mut [&mut p], 0.0, &AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Parameter::new(Tensor::vector(vec![0.2, 0.4]), true);
            for k in 0..100 {
                p.zero_grad();
                let w = p.value.data().to_vec();
                p.grad = Tensor::vector(vec![2.0 * w[0] - (k as f64).sin(), w[1] * w[1]]);
                adam_step(&mut [&mut p], 1e-2, &AdamConfig::default()).unwrap();
            }
            p.value
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
