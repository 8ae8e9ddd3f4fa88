//! Multilayer perceptrons whose hidden activations can be swapped between
//! ReLU, one shared frozen CTU (steering) and per-neuron trainable CTUs, and
//! whose dense layers can carry low-rank adapters.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::{ctu, CtuParams, RawCtuParams, DEFAULT_EPS, DEFAULT_SOFTPLUS_THRESHOLD};
use crate::autodiff::{CtuSource, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{kaiming_uniform_init, SplitMix64};
use crate::tensor::Tensor;

/// Checkpoint container identifier and version.
pub const CHECKPOINT_FORMAT: &str = "ctkit-network";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Kaiming slope used for dense weights (`a = 0`, the ReLU gain).
pub const DENSE_INIT_SLOPE: f64 = 0.0;
/// Kaiming slope used for the adapter `B` matrix.
pub const LORA_INIT_SLOPE: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SlotSpec {
    Relu,
    SharedCtu { beta: f64, c: f64 },
    TrainableCtu { raw_beta: f64, raw_coeff: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// One entry per hidden layer; empty means all ReLU.
    pub activation: Vec<SlotSpec>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn relu(widths: Vec<usize>, seed: u64) -> Self {
        Self {
            widths,
            activation: Vec::new(),
            seed,
        }
    }
}

/// Low-rank additive adapter: the layer output gains `(alpha / r) · x (B A)ᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `out × r`, kaiming-uniform with `a = √5`.
    pub b: Parameter,
    /// `r × in`, zero-initialized so the adapter starts as a no-op.
    pub a: Parameter,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) · B A`, shape `out × in`.
    pub fn delta(&self) -> Tensor {
        let ba = self.b.value.matmul(&self.a.value).expect("adapter shapes agree");
        let k = self.scale();
        ba.map(|v| v * k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub weight: Parameter,
    pub bias: Parameter,
    pub lora: Option<LoraAdapter>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.rows()
    }

    /// Base weight plus the adapter delta, if any.
    pub fn effective_weight(&self) -> Tensor {
        match &self.lora {
            None => self.weight.value.clone(),
            Some(adapter) => {
                let mut w = self.weight.value.clone();
                w.add_assign(&adapter.delta()).expect("adapter matches layer");
                w
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActivationSlot {
    Relu,
    /// Uses the network-wide shared [`CtuParams`].
    SharedCtu,
    /// One raw (β, c) pair per output neuron of the preceding dense layer.
    TrainableCtu {
        raw_beta: Parameter,
        raw_coeff: Parameter,
    },
}

impl ActivationSlot {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::SharedCtu => "shared_ctu",
            Self::TrainableCtu { .. } => "trainable_ctu",
        }
    }
}

/// What a parameter is for; trainers select trainable sets by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Weights and biases of every dense layer except the last.
    Hidden,
    /// Weight and bias of the final dense layer.
    Head,
    Lora,
    Ct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCategory {
    /// Dense weights and biases.
    Base,
    /// Curvature-tuning parameters (1 for a shared β, 2 per neuron for trainable units).
    Ct,
    Lora,
    /// Sum of the three categories above.
    All,
}

impl FromStr for ParamCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "ct" => Ok(Self::Ct),
            "lora" => Ok(Self::Lora),
            "all" => Ok(Self::All),
            other => Err(Error::UnknownCategory(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    widths: Vec<usize>,
    seed: u64,
    layers: Vec<Dense>,
    slots: Vec<ActivationSlot>,
    shared_ctu: Option<CtuParams<f64>>,
}

/// Tape handles for every parameter, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

/// Decoded (β, c) of one hidden layer, for reports and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCtSnapshot {
    pub layer: usize,
    pub kind: String,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    widths: Vec<usize>,
    slot_kinds: Vec<String>,
    decoded_ct: Vec<LayerCtSnapshot>,
    network: Network,
}

pub fn build_mlp(spec: &MlpSpec) -> Result<Network> {
    if spec.widths.len() < 2 || spec.widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidParameter(format!(
            "widths {:?} need length >= 2 and entries >= 1",
            spec.widths
        )));
    }
    let hidden = spec.widths.len() - 2;
    if !spec.activation.is_empty() && spec.activation.len() != hidden {
        return Err(Error::DimensionMismatch {
            expected: hidden,
            got: spec.activation.len(),
        });
    }
    let layers = spec
        .widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let mut rng = SplitMix64::derived(spec.seed, l as u64);
            Dense {
                weight: Parameter::new(kaiming_uniform_init(&[w[1], w[0]], DENSE_INIT_SLOPE, &mut rng), true),
                bias: Parameter::new(Tensor::zeros(&[w[1]]), true),
                lora: None,
            }
        })
        .collect();
    let mut net = Network {
        widths: spec.widths.clone(),
        seed: spec.seed,
        layers,
        slots: vec![ActivationSlot::Relu; hidden],
        shared_ctu: None,
    };
    for (l, slot) in spec.activation.iter().enumerate() {
        match *slot {
            SlotSpec::Relu => {}
            SlotSpec::SharedCtu { beta, c } => {
                let p = CtuParams::new(beta, c)?;
                match net.shared_ctu {
                    Some(existing) if existing != p => {
                        return Err(Error::InvalidParameter(
                            "shared CTU slots must agree on (beta, c)".into(),
                        ))
                    }
                    _ => net.shared_ctu = Some(p),
                }
                net.slots[l] = ActivationSlot::SharedCtu;
            }
            SlotSpec::TrainableCtu { raw_beta, raw_coeff } => {
                net.slots[l] = trainable_slot(spec.widths[l + 1], raw_beta, raw_coeff);
            }
        }
    }
    Ok(net)
}

fn trainable_slot(width: usize, raw_beta: f64, raw_coeff: f64) -> ActivationSlot {
    ActivationSlot::TrainableCtu {
        raw_beta: Parameter::new(Tensor::filled(&[width], raw_beta), true),
        raw_coeff: Parameter::new(Tensor::filled(&[width], raw_coeff), true),
    }
}

impl Network {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn slots(&self) -> &[ActivationSlot] {
        &self.slots
    }

    pub fn shared_ctu(&self) -> Option<&CtuParams<f64>> {
        self.shared_ctu.as_ref()
    }

    pub fn is_pure_relu(&self) -> bool {
        self.slots.iter().all(|s| matches!(s, ActivationSlot::Relu))
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Swaps every ReLU slot for one shared, frozen CTU with the given (β, c).
    pub fn replace_relu_shared(&self, beta: f64, c: f64) -> Result<Network> {
        if !self.slots.iter().any(|s| matches!(s, ActivationSlot::Relu)) {
            return Err(Error::NoReluSlots);
        }
        let mut net = self.clone();
        net.shared_ctu = Some(CtuParams::new(beta, c)?);
        for slot in &mut net.slots {
            if matches!(slot, ActivationSlot::Relu) {
                *slot = ActivationSlot::SharedCtu;
            }
        }
        Ok(net)
    }

    /// Re-targets the shared CTU of a steered network without touching weights.
    pub fn set_shared_ctu(&mut self, params: CtuParams<f64>) -> Result<()> {
        if !self.slots.iter().any(|s| matches!(s, ActivationSlot::SharedCtu)) {
            return Err(Error::InvalidParameter("network has no shared CTU slots".into()));
        }
        self.shared_ctu = Some(params);
        Ok(())
    }

    /// Turns every CTU slot back into ReLU.
    pub fn restore_relu(&self) -> Network {
        let mut net = self.clone();
        net.slots.iter_mut().for_each(|s| *s = ActivationSlot::Relu);
        net.shared_ctu = None;
        net
    }

    /// Swaps every ReLU slot for per-neuron trainable CTUs and freezes all dense weights.
    pub fn replace_relu_trainable(&self, raw_beta_init: f64, raw_coeff_init: f64) -> Result<Network> {
        if !self.slots.iter().any(|s| matches!(s, ActivationSlot::Relu)) {
            return Err(Error::NoReluSlots);
        }
        let mut net = self.clone();
        for (l, slot) in net.slots.iter_mut().enumerate() {
            if matches!(slot, ActivationSlot::Relu) {
                *slot = trainable_slot(self.widths[l + 1], raw_beta_init, raw_coeff_init);
            }
        }
        net.set_trainable(|role| role == ParamRole::Ct);
        Ok(net)
    }

    /// Adds an adapter to every dense layer and freezes all base weights.
    pub fn attach_lora(&self, rank: usize, alpha: f64) -> Result<Network> {
        if rank == 0 {
            return Err(Error::InvalidParameter("LoRA rank must be >= 1".into()));
        }
        let mut net = self.clone();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let mut rng = SplitMix64::derived(self.seed, 1_000 + l as u64);
            let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
            layer.lora = Some(LoraAdapter {
                b: Parameter::new(kaiming_uniform_init(&[fan_out, rank], LORA_INIT_SLOPE, &mut rng), true),
                a: Parameter::new(Tensor::zeros(&[rank, fan_in]), true),
                rank,
                alpha,
            });
        }
        net.set_trainable(|role| role == ParamRole::Lora);
        Ok(net)
    }

    /// Sets each parameter's trainable flag from its role.
    pub fn set_trainable(&mut self, rule: impl Fn(ParamRole) -> bool) {
        for (role, p) in self.params_mut() {
            p.trainable = rule(role);
        }
    }

    pub fn params(&self) -> Vec<(ParamRole, &Parameter)> {
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let role = if l == last { ParamRole::Head } else { ParamRole::Hidden };
            out.push((role, &layer.weight));
            out.push((role, &layer.bias));
            if let Some(adapter) = &layer.lora {
                out.push((ParamRole::Lora, &adapter.b));
                out.push((ParamRole::Lora, &adapter.a));
            }
        }
        for slot in &self.slots {
            if let ActivationSlot::TrainableCtu { raw_beta, raw_coeff } = slot {
                out.push((ParamRole::Ct, raw_beta));
                out.push((ParamRole::Ct, raw_coeff));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Parameter)> {
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let role = if l == last { ParamRole::Head } else { ParamRole::Hidden };
            out.push((role, &mut layer.weight));
            out.push((role, &mut layer.bias));
            if let Some(adapter) = &mut layer.lora {
                out.push((ParamRole::Lora, &mut adapter.b));
                out.push((ParamRole::Lora, &mut adapter.a));
            }
        }
        for slot in &mut self.slots {
            if let ActivationSlot::TrainableCtu { raw_beta, raw_coeff } = slot {
                out.push((ParamRole::Ct, raw_beta));
                out.push((ParamRole::Ct, raw_coeff));
            }
        }
        out
    }

    pub fn param_count(&self, which: ParamCategory) -> usize {
        let base: usize = self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        let lora: usize = self
            .layers
            .iter()
            .filter_map(|l| l.lora.as_ref())
            .map(|a| a.b.len() + a.a.len())
            .sum();
        let trainable_ct: usize = self
            .slots
            .iter()
            .map(|s| match s {
                ActivationSlot::TrainableCtu { raw_beta, raw_coeff } => raw_beta.len() + raw_coeff.len(),
                _ => 0,
            })
            .sum();
        // A steered network carries a single β; c is fixed.
        let shared_ct = usize::from(self.slots.iter().any(|s| matches!(s, ActivationSlot::SharedCtu)));
        let ct = trainable_ct + shared_ct;
        match which {
            ParamCategory::Base => base,
            ParamCategory::Ct => ct,
            ParamCategory::Lora => lora,
            ParamCategory::All => base + ct + lora,
        }
    }

    /// Number of parameters currently flagged trainable.
    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
    }

    /// Fingerprint of the dense base weights and biases.
    pub fn base_checksum(&self) -> u64 {
        self.layers.iter().fold(0u64, |acc, l| {
            acc.rotate_left(7) ^ l.weight.value.checksum() ^ l.bias.value.checksum().rotate_left(3)
        })
    }

    /// Fingerprint of every dense layer except the last.
    pub fn backbone_checksum(&self) -> u64 {
        let n = self.layers.len() - 1;
        self.layers[..n].iter().fold(0u64, |acc, l| {
            acc.rotate_left(7) ^ l.weight.value.checksum() ^ l.bias.value.checksum().rotate_left(3)
        })
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Decoded (β, c) for each hidden layer; ReLU layers report empty lists.
    pub fn ct_snapshot(&self) -> Vec<LayerCtSnapshot> {
        self.slots
            .iter()
            .enumerate()
            .map(|(l, slot)| {
                let (beta, c) = match slot {
                    ActivationSlot::Relu => (vec![], vec![]),
                    ActivationSlot::SharedCtu => {
                        let p = self.shared_ctu.expect("shared slot has params");
                        (vec![p.beta()], vec![p.c()])
                    }
                    ActivationSlot::TrainableCtu { raw_beta, raw_coeff } => raw_beta
                        .value
                        .data()
                        .iter()
                        .zip(raw_coeff.value.data())
                        .map(|(&b, &c)| {
                            let p = RawCtuParams::new(b, c).decode();
                            (p.beta(), p.c())
                        })
                        .unzip(),
                };
                LayerCtSnapshot {
                    layer: l,
                    kind: slot.kind().to_string(),
                    beta,
                    c,
                }
            })
            .collect()
    }

    fn slot_params(&self, l: usize) -> Vec<CtuParams<f64>> {
        match &self.slots[l] {
            ActivationSlot::Relu => vec![],
            ActivationSlot::SharedCtu => vec![self.shared_ctu.expect("shared slot has params")],
            ActivationSlot::TrainableCtu { raw_beta, raw_coeff } => raw_beta
                .value
                .data()
                .iter()
                .zip(raw_coeff.value.data())
                .map(|(&b, &c)| RawCtuParams::new(b, c).decode_with(DEFAULT_EPS, DEFAULT_SOFTPLUS_THRESHOLD))
                .collect(),
        }
    }

    fn dense_forward(layer: &Dense, x: &[f64], out: &mut Vec<f64>) {
        let fan_in = layer.fan_in();
        let w = layer.weight.value.data();
        let b = layer.bias.value.data();
        out.clear();
        out.extend((0..layer.fan_out()).map(|o| {
            let dot: f64 = x.iter().zip(&w[o * fan_in..(o + 1) * fan_in]).map(|(a, b)| a * b).sum();
            dot + b[o]
        }));
        if let Some(adapter) = &layer.lora {
            let r = adapter.rank;
            let a = adapter.a.value.data();
            let hidden: Vec<f64> = (0..r)
                .map(|k| x.iter().zip(&a[k * fan_in..(k + 1) * fan_in]).map(|(p, q)| p * q).sum())
                .collect();
            let bm = adapter.b.value.data();
            let scale = adapter.scale();
            for (o, slot) in out.iter_mut().enumerate() {
                let up: f64 = hidden.iter().zip(&bm[o * r..(o + 1) * r]).map(|(p, q)| p * q).sum();
                *slot += scale * up;
            }
        }
    }

    fn apply_slot(&self, l: usize, params: &[CtuParams<f64>], z: &mut [f64]) {
        match &self.slots[l] {
            ActivationSlot::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            ActivationSlot::SharedCtu => {
                let p = &params[0];
                z.iter_mut().for_each(|v| *v = ctu(*v, p));
            }
            ActivationSlot::TrainableCtu { .. } => {
                z.iter_mut().zip(params).for_each(|(v, p)| *v = ctu(*v, p));
            }
        }
    }

    /// Output for a single input point.
    pub fn eval_point(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut buf = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            Self::dense_forward(layer, &h, &mut buf);
            if l < last {
                let params = self.slot_params(l);
                self.apply_slot(l, &params, &mut buf);
            }
            std::mem::swap(&mut h, &mut buf);
        }
        h
    }

    /// First output coordinate at `x` (the logit for binary tasks).
    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        self.eval_point(x)[0]
    }

    /// Hidden pre-activations `z^ℓ` at `x`, one vector per hidden layer.
    pub fn preactivations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut h = x.to_vec();
        let mut buf = Vec::new();
        let mut out = Vec::with_capacity(self.slots.len());
        for l in 0..self.slots.len() {
            Self::dense_forward(&self.layers[l], &h, &mut buf);
            out.push(buf.clone());
            let params = self.slot_params(l);
            self.apply_slot(l, &params, &mut buf);
            std::mem::swap(&mut h, &mut buf);
        }
        out
    }

    /// Batched inference, `N × d_in` to `N × d_out`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.output_dim());
        let slot_params: Vec<_> = (0..self.slots.len()).map(|l| self.slot_params(l)).collect();
        let last = self.layers.len() - 1;
        let mut buf = Vec::new();
        for i in 0..n {
            let mut h = x.row(i).to_vec();
            for (l, layer) in self.layers.iter().enumerate() {
                Self::dense_forward(layer, &h, &mut buf);
                if l < last {
                    self.apply_slot(l, &slot_params[l], &mut buf);
                }
                std::mem::swap(&mut h, &mut buf);
            }
            data.extend_from_slice(&h);
        }
        let out = Tensor::matrix(n, self.output_dim(), data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "network_forward" });
        }
        Ok(out)
    }

    /// Records a forward pass on `tape`; returns the output node and the parameter bindings.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Tensor) -> Result<(Var, Bindings)> {
        let input = tape.constant(x.clone())?;
        self.forward_tape_from(tape, input)
    }

    /// Like [`Network::forward_tape`] but starting from an existing tape node, so
    /// gradients can flow back to the input.
    pub fn forward_tape_from(&self, tape: &mut Tape, input: Var) -> Result<(Var, Bindings)> {
        let mut vars = Vec::new();
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(&layer.weight)?;
            let b = tape.param(&layer.bias)?;
            vars.push(w);
            vars.push(b);
            let adapter = match &layer.lora {
                Some(a) => {
                    let bv = tape.param(&a.b)?;
                    let av = tape.param(&a.a)?;
                    vars.push(bv);
                    vars.push(av);
                    Some((bv, av, a.scale()))
                }
                None => None,
            };
            layer_vars.push((w, b, adapter));
        }
        let mut slot_vars = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            if let ActivationSlot::TrainableCtu { raw_beta, raw_coeff } = slot {
                let rb = tape.param(raw_beta)?;
                let rc = tape.param(raw_coeff)?;
                vars.push(rb);
                vars.push(rc);
                slot_vars.push(Some((rb, rc)));
            } else {
                slot_vars.push(None);
            }
        }

        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, (w, b, adapter)) in layer_vars.into_iter().enumerate() {
            let mut z = tape.affine(h, w, Some(b))?;
            if let Some((bv, av, scale)) = adapter {
                let down = tape.affine(h, av, None)?;
                let up = tape.affine(down, bv, None)?;
                let scaled = tape.scale(up, scale)?;
                z = tape.add(z, scaled)?;
            }
            if l < last {
                z = match &self.slots[l] {
                    ActivationSlot::Relu => tape.relu(z)?,
                    ActivationSlot::SharedCtu => {
                        tape.ctu(z, CtuSource::Fixed(self.shared_ctu.expect("shared params")))?
                    }
                    ActivationSlot::TrainableCtu { .. } => {
                        let (rb, rc) = slot_vars[l].expect("bound above");
                        tape.ctu(
                            z,
                            CtuSource::Raw {
                                raw_beta: rb,
                                raw_coeff: rc,
                                eps: DEFAULT_EPS,
                                threshold: DEFAULT_SOFTPLUS_THRESHOLD,
                            },
                        )?
                    }
                };
            }
            h = z;
        }
        Ok((h, Bindings { vars }))
    }

    /// Exact gradient of the first output with respect to the input at `x`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?, true)?;
        let (out, _) = self.forward_tape_from(&mut tape, input)?;
        let first = if self.output_dim() == 1 {
            out
        } else {
            let mut mask = vec![0.0; self.output_dim()];
            mask[0] = 1.0;
            let m = tape.constant(Tensor::matrix(1, mask.len(), mask)?)?;
            tape.mul(out, m)?
        };
        let loss = tape.sum(first)?;
        tape.backward(loss)?;
        Ok(tape.grad(input).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
    }

    /// Copies tape gradients into the trainable parameters' `grad` buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        let params = self.params_mut();
        if params.len() != bindings.vars.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: bindings.vars.len(),
            });
        }
        for ((_, p), &v) in params.into_iter().zip(&bindings.vars) {
            p.accumulate_from(tape, v)?;
        }
        Ok(())
    }

    /// Versioned JSON checkpoint; floats round-trip bit-exactly.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            widths: self.widths.clone(),
            slot_kinds: self.slots.iter().map(|s| s.kind().to_string()).collect(),
            decoded_ct: self.ct_snapshot(),
            network: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Network> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a network checkpoint: {}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt.network)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::DEFAULT_RAW_BETA;

    fn net(widths: &[usize]) -> Network {
        build_mlp(&MlpSpec::relu(widths.to_vec(), 7)).unwrap()
    }

    #[test]
    fn build_shapes() {
        let n = net(&[2, 20, 20, 1]);
        assert_eq!(n.layers().len(), 3);
        assert_eq!(n.slots().len(), 2);
        assert_eq!(n.layers()[1].weight.value.shape(), &[20, 20]);
        let reg = net(&[1, 64, 64, 64, 64, 64, 64, 64, 64, 1]);
        assert_eq!(reg.layers().len(), 9);
        assert!(build_mlp(&MlpSpec::relu(vec![3], 0)).is_err());
        assert!(build_mlp(&MlpSpec::relu(vec![3, 0, 1], 0)).is_err());
        assert!(n.layers().iter().all(|l| l.bias.value.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn param_counts() {
        let base = net(&[2, 7, 1]);
        assert_eq!(base.param_count(ParamCategory::Base), 2 * 7 + 7 + 7 + 1);
        let tct = base.replace_relu_trainable(DEFAULT_RAW_BETA, 0.0).unwrap();
        assert_eq!(tct.param_count(ParamCategory::Ct), 14);
        let sct = base.replace_relu_shared(0.9, 0.5).unwrap();
        assert_eq!(sct.param_count(ParamCategory::Ct), 1);
        let lora = base.attach_lora(1, 1.0).unwrap();
        assert_eq!(lora.param_count(ParamCategory::Lora), 17);
        assert_eq!(
            lora.param_count(ParamCategory::All),
            lora.param_count(ParamCategory::Base) + lora.param_count(ParamCategory::Lora)
        );
        assert!("bogus".parse::<ParamCategory>().is_err());
    }

    #[test]
    fn replacement_preserves_weights() {
        let base = net(&[2, 7, 7, 1]);
        let sum = base.base_checksum();
        assert_eq!(base.replace_relu_shared(0.7, 0.5).unwrap().base_checksum(), sum);
        assert_eq!(base.replace_relu_trainable(1.0, 0.0).unwrap().base_checksum(), sum);
        assert_eq!(base.attach_lora(2, 1.0).unwrap().base_checksum(), sum);
        let back = base.replace_relu_shared(0.7, 0.5).unwrap().restore_relu();
        assert_eq!(back, base);
    }

    #[test]
    fn no_relu_slots_is_an_error() {
        let sct = net(&[2, 4, 1]).replace_relu_shared(0.7, 0.5).unwrap();
        assert!(matches!(sct.replace_relu_shared(0.5, 0.5), Err(Error::NoReluSlots)));
        let linear = net(&[2, 1]);
        assert!(matches!(linear.replace_relu_trainable(1.0, 0.0), Err(Error::NoReluSlots)));
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let base = net(&[3, 5, 4, 2]);
        let mut variants = vec![
            base.clone(),
            base.replace_relu_shared(0.8, 0.3).unwrap(),
            base.replace_relu_trainable(0.4, -0.7).unwrap(),
            base.attach_lora(2, 3.0).unwrap(),
        ];
        // Give the adapter a non-trivial A so its path is exercised.
        if let Some(adapter) = &mut variants[3].layers_mut()[0].lora {
            adapter.a.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        }
        let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]).unwrap();
        for v in &variants {
            let direct = v.forward(&x).unwrap();
            let mut tape = Tape::new();
            let (out, _) = v.forward_tape(&mut tape, &x).unwrap();
            for (a, b) in direct.data().iter().zip(tape.value(out).data()) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(v.eval_point(x.row(1)), direct.row(1).to_vec());
        }
    }

    #[test]
    fn lora_starts_as_noop() {
        let base = net(&[2, 7, 1]);
        let lora = base.attach_lora(1, 1.0).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.5, 1.5, -1.5]).unwrap();
        assert_eq!(base.forward(&x).unwrap(), lora.forward(&x).unwrap());
        let l0 = lora.layers()[0].lora.as_ref().unwrap();
        assert!(l0.a.value.data().iter().all(|&v| v == 0.0));
        assert!(l0.b.value.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let n = net(&[2, 7, 1])
            .replace_relu_trainable(DEFAULT_RAW_BETA, 0.0)
            .unwrap()
            .attach_lora(1, 1.0)
            .unwrap();
        let text = n.to_checkpoint_json().unwrap();
        let back = Network::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.to_checkpoint_json().unwrap(), text);
        assert!(Network::from_checkpoint_json("{}").is_err());
    }
}
