//! Full-batch Adam training procedures: base pretraining, steering grid
//! search, trainable-CTU finetuning, linear probing and LoRA finetuning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{DEFAULT_RAW_BETA, DEFAULT_RAW_COEFF};
use crate::autodiff::{adam_step, AdamConfig, Tape};
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::network::{ActivationSlot, Network, ParamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    BceLogits,
    Mse,
}

impl LossKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => LossKind::BceLogits,
            TaskKind::Regression => LossKind::Mse,
        }
    }
}

/// Optional learning-rate schedule; constant by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup_steps`, then the rate is divided by
    /// `factor` once `decay_at` steps have run.
    WarmupStepDecay {
        warmup_steps: usize,
        decay_at: usize,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn multiplier(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupStepDecay {
                warmup_steps,
                decay_at,
                factor,
            } => {
                let warm = if warmup_steps > 0 && step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    1.0
                };
                let decay = if step >= decay_at { 1.0 / factor } else { 1.0 };
                warm * decay
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Dense weights during pretraining; adapters during LoRA finetuning.
    pub lr_main: f64,
    /// Raw (β, c) parameters.
    pub lr_ct: f64,
    /// Final dense layer when it is trained alongside other parameters.
    pub lr_head: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Record the loss every this many steps (0 records only the endpoints).
    pub eval_every: usize,
    /// Whether finetuners also update the final dense layer.
    pub train_head: bool,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_main: 1e-3,
            lr_ct: 1e-1,
            lr_head: 1e-3,
            loss: LossKind::BceLogits,
            seed: 0,
            eval_every: 100,
            train_head: false,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_main", self.lr_main), ("lr_ct", self.lr_ct), ("lr_head", self.lr_head)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name}={lr} must be > 0")));
            }
        }
        if let LrSchedule::WarmupStepDecay { factor, .. } = self.schedule {
            if !(factor > 0.0) {
                return Err(Error::Config(format!("decay factor {factor} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub curve: Vec<LossPoint>,
}

/// Mean, standard deviation and a 10-bin histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<usize>,
}

impl UnitSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut histogram = vec![0; 10];
        for &v in values {
            histogram[((v * 10.0) as usize).min(9)] += 1;
        }
        Self {
            mean,
            std: var.sqrt(),
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtSummary {
    pub beta: UnitSummary,
    pub c: UnitSummary,
}

#[derive(Debug, Clone)]
pub struct TctOutcome {
    pub net: Network,
    pub curve: Vec<LossPoint>,
    pub summary: CtSummary,
}

fn loss_on_tape(tape: &mut Tape, net: &Network, data: &Dataset, loss: LossKind) -> Result<(crate::autodiff::Var, crate::network::Bindings)> {
    let (out, bindings) = net.forward_tape(tape, &data.inputs)?;
    let target = data.target_tensor();
    let l = match loss {
        LossKind::BceLogits => tape.bce_with_logits_loss(out, &target)?,
        LossKind::Mse => tape.mse_loss(out, &target)?,
    };
    Ok((l, bindings))
}

/// Current training loss without touching gradients.
pub fn evaluate_loss(net: &Network, data: &Dataset, loss: LossKind) -> Result<f64> {
    let out = net.forward(&data.inputs)?;
    let n = data.len().max(1) as f64;
    let total: f64 = out
        .data()
        .iter()
        .zip(&data.targets)
        .map(|(&z, &y)| match loss {
            LossKind::BceLogits => crate::scalar::log1p_exp(z) - y * z,
            LossKind::Mse => (z - y) * (z - y),
        })
        .sum();
    Ok(total / n)
}

/// Core loop: parameters whose role maps to `Some(lr)` are trainable, all
/// others are frozen for the duration of the run.
fn fit(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    lr_for: impl Fn(ParamRole) -> Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.set_trainable(|role| lr_for(role).is_some());
    for (_, p) in net.params_mut() {
        p.reset_optimizer();
    }
    let mut curve = Vec::new();
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        tape.reset();
        net.zero_grad();
        let (loss, bindings) = loss_on_tape(&mut tape, &net, data, cfg.loss)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        if step == 0 || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            curve.push(LossPoint { step, loss: value });
        }
        tape.backward(loss)?;
        net.accumulate_grads(&tape, &bindings)?;
        let mult = cfg.schedule.multiplier(step);
        for (role, p) in net.params_mut() {
            if let Some(lr) = lr_for(role) {
                adam_step(&mut [p], lr * mult, &cfg.adam)?;
            }
        }
    }
    let final_loss = evaluate_loss(&net, data, cfg.loss)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    curve.push(LossPoint {
        step: cfg.steps,
        loss: final_loss,
    });
    Ok(TrainOutcome { net, curve })
}

/// Pretrains every dense layer of a ReLU network.
pub fn train_base(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !net.is_pure_relu() {
        return Err(Error::InvalidParameter("base training expects ReLU slots".into()));
    }
    fit(net.clone(), data, cfg, |role| match role {
        ParamRole::Hidden | ParamRole::Head => Some(cfg.lr_main),
        _ => None,
    })
}

/// Trains the raw (β, c) pairs (and the head when `cfg.train_head`); dense weights stay frozen.
pub fn train_tct(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TctOutcome> {
    if !net.slots().iter().any(|s| matches!(s, ActivationSlot::TrainableCtu { .. })) {
        return Err(Error::NoTrainableCt);
    }
    let out = fit(net.clone(), data, cfg, |role| match role {
        ParamRole::Ct => Some(cfg.lr_ct),
        ParamRole::Head if cfg.train_head => Some(cfg.lr_head),
        _ => None,
    })?;
    let summary = ct_summary(&out.net);
    Ok(TctOutcome {
        net: out.net,
        curve: out.curve,
        summary,
    })
}

pub fn ct_summary(net: &Network) -> CtSummary {
    let (mut betas, mut cs) = (Vec::new(), Vec::new());
    for snap in net.ct_snapshot() {
        if snap.kind == "trainable_ctu" {
            betas.extend(snap.beta);
            cs.extend(snap.c);
        }
    }
    CtSummary {
        beta: UnitSummary::from_values(&betas),
        c: UnitSummary::from_values(&cs),
    }
}

/// Retrains only the final dense layer on frozen features.
pub fn train_linear_probe(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(net.clone(), data, cfg, |role| match role {
        ParamRole::Head => Some(cfg.lr_head),
        _ => None,
    })
}

/// Trains the adapters (with `lr_main`) and optionally the head; base weights stay frozen.
pub fn train_lora(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !net.has_lora() {
        return Err(Error::InvalidParameter("network has no LoRA adapters".into()));
    }
    fit(net.clone(), data, cfg, |role| match role {
        ParamRole::Lora => Some(cfg.lr_main),
        ParamRole::Head if cfg.train_head => Some(cfg.lr_head),
        _ => None,
    })
}

/// Accuracy for classification (logit > 0 predicts 1), negative MSE for regression.
pub fn validation_metric(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = net.forward(&data.inputs)?;
    let n = data.len() as f64;
    Ok(match data.task {
        TaskKind::Classification => {
            let correct = out
                .data()
                .iter()
                .zip(&data.targets)
                .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
                .count();
            correct as f64 / n
        }
        TaskKind::Regression => {
            -out.data().iter().zip(&data.targets).map(|(z, y)| (z - y) * (z - y)).sum::<f64>() / n
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMode {
    /// Evaluate the steered network as is.
    Direct,
    /// Retrain the head at every β before evaluating.
    Reprobe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOptions {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub step: f64,
    pub c: f64,
    pub mode: SweepMode,
    /// Head-retraining schedule for [`SweepMode::Reprobe`].
    pub probe: TrainConfig,
}

impl Default for GridSearchOptions {
    fn default() -> Self {
        Self {
            beta_lo: 0.7,
            beta_hi: 1.0,
            step: 0.01,
            c: 0.5,
            mode: SweepMode::Direct,
            probe: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub betas: Vec<f64>,
    pub metrics: Vec<f64>,
    pub best_beta: f64,
    pub best_metric: f64,
    /// Metric of the unmodified ReLU network.
    pub baseline_metric: f64,
}

/// Inclusive grid `lo, lo + step, …, hi`; the last point snaps to `hi`.
pub fn beta_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("bad beta grid lo={lo} hi={hi} step={step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| {
            let b = lo + i as f64 * step;
            if i + 1 == count && (b - hi).abs() < 1e-9 {
                hi
            } else {
                b.min(1.0)
            }
        })
        .collect())
}

/// Steering sweep over β with a fixed c; never mutates `net`. `train` is only
/// used by [`SweepMode::Reprobe`].
pub fn sct_grid_search(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    opts: &GridSearchOptions,
) -> Result<GridSearchResult> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let betas = beta_grid(opts.beta_lo, opts.beta_hi, opts.step)?;
    let relu = net.restore_relu();
    let evaluate = |candidate: Network| -> Result<f64> {
        match opts.mode {
            SweepMode::Direct => validation_metric(&candidate, val),
            SweepMode::Reprobe => {
                let probed = train_linear_probe(&candidate, train, &opts.probe)?;
                validation_metric(&probed.net, val)
            }
        }
    };
    let baseline_metric = evaluate(relu.clone())?;
    let metrics = betas
        .par_iter()
        .map(|&beta| evaluate(relu.replace_relu_shared(beta, opts.c)?))
        .collect::<Result<Vec<f64>>>()?;
    // Ties go to the larger β.
    let best = (0..betas.len())
        .rev()
        .fold(None::<usize>, |best, i| match best {
            Some(b) if metrics[b] >= metrics[i] => Some(b),
            _ => Some(i),
        })
        .expect("grid is non-empty");
    Ok(GridSearchResult {
        best_beta: betas[best],
        best_metric: metrics[best],
        betas,
        metrics,
        baseline_metric,
    })
}

/// Default raw initialization for trainable units.
pub fn default_tct_init() -> (f64, f64) {
    (DEFAULT_RAW_BETA, DEFAULT_RAW_COEFF)
}
