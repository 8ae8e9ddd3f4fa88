//! Synthetic toy datasets: the two-class annulus around the unit circle and
//! a 1-D sine regression target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    /// `N × D`.
    pub inputs: Tensor,
    /// Labels in {0, 1} for classification, real values for regression.
    pub targets: Vec<f64>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(task: TaskKind, inputs: Tensor, targets: Vec<f64>, splits: Vec<Split>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != targets.len() || targets.len() != splits.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                got: targets.len(),
            });
        }
        Ok(Self {
            task,
            inputs,
            targets,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_tensor(&self) -> Tensor {
        Tensor::vector(self.targets.clone())
    }

    /// Rows carrying the given split tag.
    pub fn subset(&self, split: Split) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.select(&keep)
    }

    fn select(&self, rows: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            task: self.task,
            inputs: Tensor::matrix(rows.len(), d, data).expect("row-major copy"),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Re-tags rows into train/val/test with the given fractions; classification
    /// splits are stratified by label.
    pub fn assign_splits(&mut self, train: f64, val: f64, test: f64, seed: u64) -> Result<()> {
        if (train + val + test - 1.0).abs() > 1e-9 || train < 0.0 || val < 0.0 || test < 0.0 {
            return Err(Error::Config(format!(
                "split fractions {train}/{val}/{test} must be non-negative and sum to 1"
            )));
        }
        let groups: Vec<Vec<usize>> = match self.task {
            TaskKind::Classification => {
                let mut zeros = Vec::new();
                let mut ones = Vec::new();
                for (i, &y) in self.targets.iter().enumerate() {
                    if y > 0.5 { ones.push(i) } else { zeros.push(i) }
                }
                vec![zeros, ones]
            }
            TaskKind::Regression => vec![(0..self.len()).collect()],
        };
        let mut rng = SplitMix64::derived(seed, 0x5_9117);
        for mut group in groups {
            // Fisher-Yates with the in-repo generator.
            for i in (1..group.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                group.swap(i, j);
            }
            let n = group.len();
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            for (k, &i) in group.iter().enumerate() {
                self.splits[i] = if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        Ok(())
    }
}

/// Radial bands of the two annulus classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    pub inner: (f64, f64),
    pub outer: (f64, f64),
}

impl Default for AnnulusSpec {
    fn default() -> Self {
        Self {
            inner: (0.0, 0.5),
            outer: (1.5, 2.0),
        }
    }
}

/// Uniform-in-area radius in `[lo, hi]`: `r² ~ U(lo², hi²)`.
fn area_uniform_radius(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    (lo * lo + rng.next_f64() * (hi * hi - lo * lo)).sqrt()
}

/// `n / 2` points per class, uniform in area: label 0 inside the inner disc,
/// label 1 in the outer ring. Classes alternate row by row; all rows are tagged train.
pub fn gen_annulus(n: usize, seed: u64) -> Result<Dataset> {
    gen_annulus_with(n, seed, AnnulusSpec::default())
}

pub fn gen_annulus_with(n: usize, seed: u64, spec: AnnulusSpec) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidParameter(format!("annulus size {n} must be even and positive")));
    }
    let mut rng = SplitMix64::derived(seed, 0xA11);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let (lo, hi) = if label == 0.0 { spec.inner } else { spec.outer };
        let r = area_uniform_radius(&mut rng, lo, hi);
        let theta = std::f64::consts::TAU * rng.next_f64();
        inputs.push(r * theta.cos());
        inputs.push(r * theta.sin());
        targets.push(label);
    }
    Dataset::new(
        TaskKind::Classification,
        Tensor::matrix(n, 2, inputs)?,
        targets,
        vec![Split::Train; n],
    )
}

/// `x ~ U(-1, 1)`, `y = sin(2πx)`.
pub fn gen_regression_1d(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = SplitMix64::derived(seed, 0x5E6);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let ys = xs.iter().map(|&x| sine_target(x)).collect();
    Dataset::new(TaskKind::Regression, Tensor::matrix(n, 1, xs)?, ys, vec![Split::Train; n])
}

pub fn sine_target(x: f64) -> f64 {
    (std::f64::consts::TAU * x).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radius(d: &Dataset, i: usize) -> f64 {
        let r = d.inputs.row(i);
        (r[0] * r[0] + r[1] * r[1]).sqrt()
    }

    #[test]
    fn annulus_geometry_and_balance() {
        let d = gen_annulus(2000, 3).unwrap();
        let mut counts = [0, 0];
        for i in 0..d.len() {
            let r = radius(&d, i);
            if d.targets[i] == 0.0 {
                counts[0] += 1;
                assert!(r <= 0.5);
            } else {
                counts[1] += 1;
                assert!((1.5..=2.0).contains(&r));
            }
        }
        assert_eq!(counts, [1000, 1000]);
        assert!(gen_annulus(7, 0).is_err());
    }

    /// Asymptotic Kolmogorov p-value for statistic `d` at sample size `n`.
    fn ks_p_value(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut p = 0.0;
        for k in 1..200 {
            let k = k as f64;
            p += 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    fn ks_statistic(mut u: Vec<f64>) -> f64 {
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = u.len() as f64;
        u.iter()
            .enumerate()
            .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
            .fold(0.0, f64::max)
    }

    #[test]
    fn annulus_is_area_uniform() {
        let d = gen_annulus(20_000, 11).unwrap();
        let (mut inner, mut outer) = (Vec::new(), Vec::new());
        for i in 0..d.len() {
            let r2 = radius(&d, i).powi(2);
            if d.targets[i] == 0.0 {
                inner.push(r2 / 0.25);
            } else {
                outer.push((r2 - 2.25) / (4.0 - 2.25));
            }
        }
        for sample in [inner, outer] {
            let n = sample.len();
            assert_eq!(n, 10_000);
            let p = ks_p_value(ks_statistic(sample), n);
            assert!(p > 0.01, "KS p-value {p}");
        }
    }

    #[test]
    fn regression_target() {
        assert!(sine_target(1.0).abs() < 1e-15 && sine_target(-1.0).abs() < 1e-15);
        assert!((sine_target(0.25) - 1.0).abs() < 1e-15);
        let a = gen_regression_1d(50, 5).unwrap();
        assert_eq!(a, gen_regression_1d(50, 5).unwrap());
        assert!(a.inputs.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn stratified_splits() {
        let mut d = gen_annulus(200, 1).unwrap();
        d.assign_splits(0.6, 0.2, 0.2, 9).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let s = d.subset(split);
            let ones = s.targets.iter().filter(|&&y| y == 1.0).count();
            assert_eq!(ones * 2, s.len(), "{split:?} not balanced");
        }
        assert_eq!(d.subset(Split::Train).len(), 120);
        assert!(d.assign_splits(0.5, 0.5, 0.5, 0).is_err());
    }
}
