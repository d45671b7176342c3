//! Model assembly, optimizers, the training loop, evaluation metrics and
//! per-variant gradient checks.
//!
//! Training is deterministic: one tape per sample, gradients summed in
//! sample order within a batch, and every random draw taken from the
//! [`SplitMix64`] carried in [`TrainState`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::cells::{CellConfig, GateBiases, StepTrace};
use crate::error::{Error, Result};
use crate::gradcheck::{self, TensorCheck};
use crate::math;
use crate::params::{Binding, ParamSet};
use crate::pooling::select_category;
use crate::rng::SplitMix64;
use crate::streams::{
    flow_analog, ActionPretrainer, AppearanceStream, BackboneConfig, FlowBiasGates, FusionMode, MotionOutput,
    MotionStream, TwoStreamModel, FLOW_DEPTH,
};
use crate::synth::{decompose_prediction, sample_indices, BBox, Dataset, DatasetMeta, ToyActivitySample};
use crate::tape::{BackwardFault, Tape, Var};
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Variants

/// The ablation ladder plus the two fusion rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Variant {
    #[cfg_attr(feature = "serde", serde(rename = "baseline"))]
    Baseline,
    #[cfg_attr(feature = "serde", serde(rename = "+output_pooling"))]
    OutputPooling,
    #[cfg_attr(feature = "serde", serde(rename = "+attention_pooling"))]
    AttentionPooling,
    #[cfg_attr(feature = "serde", serde(rename = "+pooling"))]
    Pooling,
    #[cfg_attr(feature = "serde", serde(rename = "lsta"))]
    Lsta,
    #[cfg_attr(feature = "serde", serde(rename = "two_stream_late"))]
    TwoStreamLate,
    #[cfg_attr(feature = "serde", serde(rename = "two_stream_crossmodal"))]
    TwoStreamCrossModal,
}

impl Variant {
    /// Single-stream rows in ladder order.
    pub const LADDER: [Variant; 5] = [
        Variant::Baseline,
        Variant::OutputPooling,
        Variant::AttentionPooling,
        Variant::Pooling,
        Variant::Lsta,
    ];

    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::OutputPooling,
        Variant::AttentionPooling,
        Variant::Pooling,
        Variant::Lsta,
        Variant::TwoStreamLate,
        Variant::TwoStreamCrossModal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::OutputPooling => "+output_pooling",
            Variant::AttentionPooling => "+attention_pooling",
            Variant::Pooling => "+pooling",
            Variant::Lsta => "lsta",
            Variant::TwoStreamLate => "two_stream_late",
            Variant::TwoStreamCrossModal => "two_stream_crossmodal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }

    /// `(attention_pooling, output_pooling, bias_control)` of the LSTA cell.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::OutputPooling => (false, true, false),
            Variant::AttentionPooling => (true, false, false),
            Variant::Pooling => (true, true, false),
            _ => (true, true, true),
        }
    }

    pub fn is_two_stream(self) -> bool {
        matches!(self, Variant::TwoStreamLate | Variant::TwoStreamCrossModal)
    }

    pub fn has_attention(self) -> bool {
        self.flags().0
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer and learning-rate schedule of one training phase.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct Schedule {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (relative to the phase start) after which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * math::powi(self.decay_factor, n as i32)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("{what}: learning rate must be positive")));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::InvalidConfig(format!("{what}: decay factor must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct ModelConfig {
    /// Memory and feature depth K.
    pub depth: usize,
    /// Channels of the first backbone layer.
    pub hidden: usize,
    /// Pooling categories C.
    pub categories: usize,
    pub kernel: usize,
    /// Frames sampled from each clip.
    pub frames: usize,
    pub flow_gates: FlowGates,
}

/// Serializable mirror of [`FlowBiasGates`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum FlowGates {
    All,
    MemoryOnly,
}

impl From<FlowGates> for FlowBiasGates {
    fn from(g: FlowGates) -> Self {
        match g {
            FlowGates::All => FlowBiasGates::All,
            FlowGates::MemoryOnly => FlowBiasGates::MemoryOnly,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 8,
            hidden: 8,
            categories: 24,
            kernel: 3,
            frames: 8,
            flow_gates: FlowGates::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub batch_size: usize,
    pub model: ModelConfig,
    /// Backbones frozen.
    pub stage1: Schedule,
    /// Last backbone layer unfrozen.
    pub stage2: Schedule,
    /// Action pretraining of the motion stream (two-stream variants only).
    pub pretrain: Schedule,
    /// Whether the appearance backbone's last layer also unfreezes in
    /// stage 2 of two-stream training.
    pub two_stream_unfreeze_appearance: bool,
}

impl TrainConfig {
    pub fn desk(variant: Variant) -> Self {
        TrainConfig {
            variant,
            seed: 0,
            batch_size: 8,
            model: ModelConfig::default(),
            stage1: Schedule {
                optimizer: OptimizerKind::Adam,
                epochs: 10,
                lr: 1e-2,
                decay_epochs: vec![],
                decay_factor: 0.1,
            },
            stage2: Schedule {
                optimizer: OptimizerKind::Adam,
                epochs: 2,
                lr: 1e-3,
                decay_epochs: vec![],
                decay_factor: 0.1,
            },
            pretrain: Schedule {
                optimizer: OptimizerKind::Adam,
                epochs: 6,
                lr: 1e-2,
                decay_epochs: vec![],
                decay_factor: 0.5,
            },
            two_stream_unfreeze_appearance: true,
        }
    }

    /// Published hyperparameters. Not runnable without the original data.
    pub fn paper(variant: Variant) -> Self {
        TrainConfig {
            variant,
            seed: 0,
            batch_size: 32,
            model: ModelConfig {
                depth: 512,
                hidden: 256,
                categories: 100,
                kernel: 3,
                frames: 25,
                flow_gates: FlowGates::All,
            },
            stage1: Schedule {
                optimizer: OptimizerKind::Adam,
                epochs: 200,
                lr: 1e-3,
                decay_epochs: vec![25, 75, 150],
                decay_factor: 0.1,
            },
            stage2: Schedule {
                optimizer: OptimizerKind::Adam,
                epochs: 100,
                lr: 1e-4,
                decay_epochs: vec![25, 75],
                decay_factor: 0.1,
            },
            pretrain: Schedule {
                optimizer: OptimizerKind::Sgd,
                epochs: 700,
                lr: 1e-2,
                decay_epochs: vec![75, 150, 250, 500],
                decay_factor: 0.5,
            },
            two_stream_unfreeze_appearance: true,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1.epochs + self.stage2.epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".to_string()));
        }
        if self.total_epochs() == 0 {
            return Err(Error::InvalidConfig("at least one epoch is required".to_string()));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.pretrain.validate("pretrain")?;
        let m = &self.model;
        if m.depth == 0 || m.hidden == 0 || m.frames == 0 {
            return Err(Error::InvalidConfig("model extents must be positive".to_string()));
        }
        if m.kernel % 2 == 0 {
            return Err(Error::EvenKernel(m.kernel));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Single(AppearanceStream),
    Two(TwoStreamModel),
}

/// A network built for one variant, model config and dataset geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub meta: DatasetMeta,
    pub net: Network,
}

/// Per-clip inputs: sampled frames and, for two-stream models, the flow stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInputs {
    pub frames: Vec<Tensor>,
    pub flow: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub traces: Vec<StepTrace>,
    pub motion: Option<MotionOutput>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn build(variant: Variant, config: &ModelConfig, meta: &DatasetMeta, seed: u64) -> Result<(Model, ParamSet)> {
        if meta.height % 2 != 0 || meta.width % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame extents {}x{} must be even",
                meta.height, meta.width
            )));
        }
        let mut rng = SplitMix64::derive(seed, 0x6d6f_6465_6c);
        let mut params = ParamSet::new();
        let (att, out, bias) = variant.flags();
        let cell = CellConfig {
            kernel: config.kernel,
            ..CellConfig::new(config.depth, meta.height / 2, meta.width / 2, config.categories)
        }
        .with_flags(att, out, bias);
        let rgb_backbone = BackboneConfig {
            in_channels: meta.channels,
            hidden: config.hidden,
            depth: config.depth,
            kernel: config.kernel,
        };
        let classes = meta.classes();
        let appearance = AppearanceStream::new("rgb", rgb_backbone, cell, classes, &mut params, &mut rng)?;
        let net = if variant.is_two_stream() {
            let flow_backbone = BackboneConfig {
                in_channels: 2 * FLOW_DEPTH,
                ..rgb_backbone
            };
            let motion = MotionStream::new(
                "flow",
                flow_backbone,
                meta.actions.max(2),
                true,
                classes,
                &mut params,
                &mut rng,
            )?;
            let src = params.get(appearance.backbone.conv1.kernel).clone();
            motion.backbone.init_conv1_from(&mut params, &src)?;
            let mode = match variant {
                Variant::TwoStreamCrossModal => FusionMode::CrossModal,
                _ => FusionMode::LateAverage,
            };
            Network::Two(TwoStreamModel::new(
                appearance,
                motion,
                mode,
                config.flow_gates.into(),
                &mut params,
                &mut rng,
            )?)
        } else {
            Network::Single(appearance)
        };
        Ok((
            Model {
                variant,
                config: config.clone(),
                meta: *meta,
                net,
            },
            params,
        ))
    }

    pub fn appearance(&self) -> &AppearanceStream {
        match &self.net {
            Network::Single(a) => a,
            Network::Two(t) => &t.appearance,
        }
    }

    pub fn cell_config(&self) -> CellConfig {
        self.appearance().cell.config
    }

    /// Raw frame index behind each model time step.
    pub fn frame_indices(&self) -> Vec<usize> {
        sample_indices(self.meta.frames, self.config.frames)
    }

    pub fn inputs(&self, sample: &ToyActivitySample) -> Result<ClipInputs> {
        let all = sample.all_frames(&self.meta)?;
        let frames = self.frame_indices().into_iter().map(|t| all[t].clone()).collect();
        let flow = if self.variant.is_two_stream() {
            Some(flow_analog(&all, self.meta.frames / 2, FLOW_DEPTH)?)
        } else {
            None
        };
        Ok(ClipInputs { frames, flow })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, inputs: &ClipInputs) -> Result<ModelOutput> {
        let frames: Vec<Var> = inputs.frames.iter().map(|f| tape.constant(f.clone())).collect();
        match &self.net {
            Network::Single(a) => {
                let out = a.forward(tape, bind, &frames, &GateBiases::default())?;
                Ok(ModelOutput {
                    logits: out.logits,
                    traces: out.traces,
                    motion: None,
                })
            }
            Network::Two(t) => {
                let flow = inputs
                    .flow
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("two-stream model needs a flow stack".to_string()))?;
                let flow = tape.constant(flow.clone());
                let out = t.forward(tape, bind, &frames, flow)?;
                Ok(ModelOutput {
                    logits: out.logits,
                    traces: out.rgb.traces,
                    motion: Some(out.flow),
                })
            }
        }
    }

    /// Whether parameter `name` trains in `stage`.
    pub fn trainable(&self, name: &str, stage: Stage, unfreeze_appearance: bool) -> bool {
        if !name.contains(".backbone.") {
            return true;
        }
        match stage {
            Stage::One => false,
            Stage::Two => {
                name.contains(".backbone.conv2.")
                    && (unfreeze_appearance || !self.variant.is_two_stream() || !name.starts_with("rgb."))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam or plain SGD with per-tensor state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Update count per tensor.
    pub steps: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| t.zeros_like()).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros.clone(), zeros),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            steps: vec![0; params.len()],
            m,
            v,
        }
    }

    /// Applies one update to the tensors selected by `mask`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, mask: &[bool]) -> Result<()> {
        if grads.len() != params.len() || mask.len() != params.len() || self.steps.len() != params.len() {
            return Err(Error::DataLength {
                expected: params.len(),
                got: grads.len(),
            });
        }
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            self.steps[i] += 1;
            let g = grads[i].data();
            let p = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps[i] as i32;
                    let c1 = 1.0 - math::powi(ADAM_BETA1, t);
                    let c2 = 1.0 - math::powi(ADAM_BETA2, t);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for j in 0..p.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        p[j] -= lr * mh / (math::sqrt(vh) + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: SplitMix64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    /// False when no pretraining epoch ran and `theta` keeps its random init.
    pub pretrained: bool,
    pub history: Vec<EpochMetrics>,
    pub action_accuracy: f64,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub config: TrainConfig,
    data: &'a Dataset,
    inputs: Vec<ClipInputs>,
}

fn batch_gradients(
    params: &ParamSet,
    trainable: &dyn Fn(&str) -> bool,
    order: &[usize],
    labels: &[usize],
    mut forward: impl FnMut(&mut Tape, &Binding, usize) -> Result<Var>,
) -> Result<(Vec<Tensor>, f64, usize)> {
    let mut acc: Vec<Tensor> = params.iter().map(|(_, _, t)| t.zeros_like()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for &i in order {
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, trainable);
        let logits = forward(&mut tape, &bind, i)?;
        if select_category(tape.value(logits).data()) == labels[i] {
            correct += 1;
        }
        let loss = tape.cross_entropy(logits, labels[i])?;
        let l = tape.value(loss).item().unwrap_or(f64::NAN);
        if !l.is_finite() {
            let culprit = params.first_non_finite().map(String::from).unwrap_or_else(|| "logits".to_string());
            return Err(Error::NonFinite(format!("loss of sample {i}: first non-finite tensor `{culprit}`")));
        }
        loss_sum += l;
        tape.backward(loss)?;
        for (a, g) in acc.iter_mut().zip(bind.gradients(&tape, params)) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / order.len() as f64;
    for a in acc.iter_mut() {
        a.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((acc, loss_sum, correct))
}

fn check_params_finite(params: &ParamSet) -> Result<()> {
    match params.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!("parameter `{name}` after update"))),
        None => Ok(()),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".to_string()));
        }
        let (model, _) = Model::build(config.variant, &config.model, &data.meta, config.seed)?;
        let inputs = data
            .samples
            .iter()
            .map(|s| model.inputs(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            model,
            config: config.clone(),
            data,
            inputs,
        })
    }

    /// Fresh parameters (after action pretraining for two-stream models).
    pub fn init_state(&self) -> Result<(TrainState, Option<PretrainReport>)> {
        let (_, mut params) = Model::build(self.config.variant, &self.config.model, &self.data.meta, self.config.seed)?;
        let report = match &self.model.net {
            Network::Two(t) => Some(self.pretrain_actions(t, &mut params)?),
            Network::Single(_) => None,
        };
        let optimizer = Optimizer::new(self.config.stage1.optimizer, &params);
        Ok((
            TrainState {
                params,
                optimizer,
                epoch: 0,
                rng: SplitMix64::derive(self.config.seed, 0x7368_7566),
            },
            report,
        ))
    }

    fn pretrain_actions(&self, net: &TwoStreamModel, params: &mut ParamSet) -> Result<PretrainReport> {
        let sched = &self.config.pretrain;
        let mut rng = SplitMix64::derive(self.config.seed, 0x7072_6574);
        let mut pre_params = ParamSet::new();
        let pre = ActionPretrainer::new(
            "pretrain",
            net.motion.backbone.config,
            net.motion.pool.categories,
            &mut pre_params,
            &mut rng,
        )?;
        let src = params.get(net.appearance.backbone.conv1.kernel).clone();
        pre.backbone.init_conv1_from(&mut pre_params, &src)?;
        let labels: Vec<usize> = self.data.samples.iter().map(|s| s.action).collect();
        let flows: Vec<&Tensor> = self
            .inputs
            .iter()
            .map(|c| c.flow.as_ref().ok_or_else(|| Error::InvalidConfig("missing flow stack".to_string())))
            .collect::<Result<_>>()?;
        let mut opt = Optimizer::new(sched.optimizer, &pre_params);
        let mask = vec![true; pre_params.len()];
        let mut history = Vec::new();
        let mut last_acc = 0.0;
        for epoch in 0..sched.epochs {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            rng.shuffle(&mut order);
            let lr = sched.lr_at(epoch);
            let (mut loss, mut correct) = (0.0, 0);
            for batch in order.chunks(self.config.batch_size) {
                let (g, l, c) = batch_gradients(&pre_params, &|_| true, batch, &labels, |tape, bind, i| {
                    let f = tape.constant(flows[i].clone());
                    pre.forward(tape, bind, f)
                })?;
                opt.step(&mut pre_params, &g, lr, &mask)?;
                check_params_finite(&pre_params)?;
                loss += l;
                correct += c;
            }
            last_acc = correct as f64 / labels.len() as f64;
            history.push(EpochMetrics {
                epoch,
                stage: 0,
                lr,
                loss: loss / labels.len() as f64,
                accuracy: last_acc,
            });
        }
        if sched.epochs > 0 {
            // accuracy of the final weights rather than the running estimate
            let mut correct = 0;
            for (i, f) in flows.iter().enumerate() {
                let mut tape = Tape::new();
                let bind = pre_params.bind(&mut tape, |_| false);
                let f = tape.constant((*f).clone());
                let z = pre.forward(&mut tape, &bind, f)?;
                if select_category(tape.value(z).data()) == labels[i] {
                    correct += 1;
                }
            }
            last_acc = correct as f64 / labels.len() as f64;
        }
        pre.handoff(&pre_params, &net.motion, params)?;
        Ok(PretrainReport {
            epochs: sched.epochs,
            pretrained: sched.epochs > 0,
            history,
            action_accuracy: last_acc,
        })
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.config.stage1.epochs {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Runs the next epoch and advances `state.epoch`.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochMetrics> {
        let epoch = state.epoch;
        if epoch >= self.config.total_epochs() {
            return Err(Error::OutOfRange {
                what: "epoch",
                index: epoch,
                bound: self.config.total_epochs(),
            });
        }
        let stage = self.stage_of(epoch);
        let (sched, rel) = match stage {
            Stage::One => (&self.config.stage1, epoch),
            Stage::Two => (&self.config.stage2, epoch - self.config.stage1.epochs),
        };
        if state.optimizer.kind != sched.optimizer {
            state.optimizer = Optimizer::new(sched.optimizer, &state.params);
        }
        let lr = sched.lr_at(rel);
        let unfreeze = self.config.two_stream_unfreeze_appearance;
        let model = &self.model;
        let trainable = move |name: &str| model.trainable(name, stage, unfreeze);
        let mask: Vec<bool> = state.params.iter().map(|(_, n, _)| trainable(n)).collect();
        let labels = self.data.labels();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        state.rng.shuffle(&mut order);
        let (mut loss, mut correct) = (0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let (g, l, c) = batch_gradients(&state.params, &trainable, batch, &labels, |tape, bind, i| {
                Ok(model.forward(tape, bind, &self.inputs[i])?.logits)
            })?;
            state.optimizer.step(&mut state.params, &g, lr, &mask)?;
            check_params_finite(&state.params)?;
            loss += l;
            correct += c;
        }
        state.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            stage: match stage {
                Stage::One => 1,
                Stage::Two => 2,
            },
            lr,
            loss: loss / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
        })
    }

    /// Trains until all configured epochs are done.
    pub fn fit(&self, state: &mut TrainState) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while state.epoch < self.config.total_epochs() {
            history.push(self.run_epoch(state)?);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
    pub pretrain: Option<PretrainReport>,
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config, data)?;
    let (mut state, pretrain) = trainer.init_state()?;
    let history = trainer.fit(&mut state)?;
    Ok(TrainOutcome {
        model: trainer.model,
        state,
        history,
        pretrain,
    })
}

// ---------------------------------------------------------------------------
// Metrics

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    /// `self - base`, entrywise.
    pub fn diff(&self, base: &Confusion) -> Result<Vec<i64>> {
        if self.classes != base.classes {
            return Err(Error::DataLength {
                expected: base.classes,
                got: self.classes,
            });
        }
        Ok(self.counts.iter().zip(&base.counts).map(|(&a, &b)| a as i64 - b as i64).collect())
    }

    /// Activity, action and object accuracy, recomputed from the counts.
    pub fn accuracies(&self, actions: usize, objects: usize) -> Result<(f64, f64, f64)> {
        let (mut act, mut obj) = (0u64, 0u64);
        for t in 0..self.classes {
            let (ta, to) = decompose_prediction(t, actions, objects)?;
            for p in 0..self.classes {
                let n = self.get(t, p);
                if n == 0 {
                    continue;
                }
                let (pa, po) = decompose_prediction(p, actions, objects)?;
                if pa == ta {
                    act += n;
                }
                if po == to {
                    obj += n;
                }
            }
        }
        let total = self.total().max(1) as f64;
        Ok((self.correct() as f64 / total, act as f64 / total, obj as f64 / total))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub loss: f64,
    pub activity_accuracy: f64,
    pub action_accuracy: f64,
    pub object_accuracy: f64,
    pub confusion: Confusion,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &Model, params: &ParamSet, data: &Dataset) -> Result<MetricsReport> {
    if data.meta != model.meta {
        return Err(Error::InvalidConfig("dataset geometry differs from the model's".to_string()));
    }
    let l = model.meta.classes();
    let mut confusion = Confusion::new(l);
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for sample in &data.samples {
        let inputs = model.inputs(sample)?;
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, |_| false);
        let out = model.forward(&mut tape, &bind, &inputs)?;
        let truth = sample.activity(model.meta.objects);
        let pred = select_category(tape.value(out.logits).data());
        let ce = tape.cross_entropy(out.logits, truth)?;
        loss += tape.value(ce).item().unwrap_or(f64::NAN);
        confusion.add(truth, pred);
        predictions.push(pred);
    }
    let (activity, action, object) = confusion.accuracies(model.meta.actions, model.meta.objects)?;
    Ok(MetricsReport {
        epochs: Vec::new(),
        loss: loss / data.len().max(1) as f64,
        activity_accuracy: activity,
        action_accuracy: action,
        object_accuracy: object,
        confusion,
        predictions,
    })
}

/// Classes sorted by decreasing gain in correct predictions of `b` over `a`
/// (ties by class index), as `(class, gain)`.
pub fn top_improved(a: &Confusion, b: &Confusion, n: usize) -> Result<Vec<(usize, i64)>> {
    let d = b.diff(a)?;
    let mut gains: Vec<(usize, i64)> = (0..a.classes).map(|c| (c, d[c * a.classes + c])).collect();
    gains.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    gains.truncate(n);
    Ok(gains)
}

// ---------------------------------------------------------------------------
// Attention

/// Attention maps `[1 x H x W]` of every time step for one clip; uniform
/// when the variant has no attention pooling.
pub fn attention_maps(model: &Model, params: &ParamSet, sample: &ToyActivitySample) -> Result<Vec<Tensor>> {
    let inputs = model.inputs(sample)?;
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, |_| false);
    let out = model.forward(&mut tape, &bind, &inputs)?;
    let cell = model.cell_config();
    let uniform = Tensor::full(&[1, cell.height, cell.width], 1.0 / cell.locations() as f64)?;
    Ok(out
        .traces
        .iter()
        .map(|t| t.s_map.map_or_else(|| uniform.clone(), |s| tape.value(s).clone()))
        .collect())
}

/// Mass of a feature-grid map falling inside a frame-pixel box. Each map
/// cell spreads its mass evenly over the pixels it covers.
pub fn box_mass(map: &Tensor, frame_h: usize, frame_w: usize, bbox: &BBox) -> Result<f64> {
    let (_, h, w) = map.shape().chw().ok_or_else(|| Error::BadShape {
        op: "box_mass",
        expected: "[1 x H x W] map".to_string(),
        got: map.shape(),
    })?;
    if h == 0 || w == 0 || frame_h % h != 0 || frame_w % w != 0 {
        return Err(Error::InvalidConfig(format!(
            "map {h}x{w} does not tile the {frame_h}x{frame_w} frame"
        )));
    }
    let (sy, sx) = (frame_h / h, frame_w / w);
    let mut mass = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut inside = 0;
            for y in i * sy..(i + 1) * sy {
                for x in j * sx..(j + 1) * sx {
                    if bbox.contains(y, x) {
                        inside += 1;
                    }
                }
            }
            mass += map.data()[i * w + j] * inside as f64 / (sy * sx) as f64;
        }
    }
    Ok(mass)
}

/// Mean attention mass inside the target box over a clip's time steps,
/// and the box's area fraction of the frame.
pub fn clip_localization(model: &Model, params: &ParamSet, sample: &ToyActivitySample) -> Result<(f64, f64)> {
    let maps = attention_maps(model, params, sample)?;
    let idx = model.frame_indices();
    let (fh, fw) = (model.meta.height, model.meta.width);
    let mut mass = 0.0;
    let mut frac = 0.0;
    for (m, &t) in maps.iter().zip(&idx) {
        let b = &sample.track[t];
        mass += box_mass(m, fh, fw, b)?;
        frac += b.area() as f64 / (fh * fw) as f64;
    }
    let n = maps.len().max(1) as f64;
    Ok((mass / n, frac / n))
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Tiny geometry for gradient checks.
pub fn gradcheck_meta() -> DatasetMeta {
    DatasetMeta {
        actions: 2,
        objects: 2,
        frames: 8,
        channels: 1,
        height: 6,
        width: 6,
    }
}

pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden: 2,
        categories: 3,
        kernel: 3,
        frames: 3,
        flow_gates: FlowGates::All,
    }
}

pub const KINK_MARGIN: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// A randomized tiny model and clip whose forward pass keeps every ReLU
/// input and argmax gap at least [`KINK_MARGIN`] from a kink.
pub struct GradcheckFixture {
    pub model: Model,
    pub params: ParamSet,
    pub inputs: ClipInputs,
    pub label: usize,
}

impl GradcheckFixture {
    pub fn new(variant: Variant, seed: u64) -> Result<Self> {
        Self::with_config(variant, &gradcheck_model_config(), seed)
    }

    pub fn with_config(variant: Variant, config: &ModelConfig, seed: u64) -> Result<Self> {
        let meta = gradcheck_meta();
        for attempt in 0..200u64 {
            let s = seed.wrapping_mul(1000).wrapping_add(attempt);
            let (model, mut params) = Model::build(variant, config, &meta, s)?;
            let mut rng = SplitMix64::derive(s, 0x6663);
            // perturb every tensor so zero-initialized biases and couplers are exercised
            let ids: Vec<_> = params.ids().collect();
            for id in ids {
                for v in params.get_mut(id).data_mut() {
                    *v += rng.uniform(-0.3, 0.3);
                }
            }
            let frames: Vec<Tensor> = (0..meta.frames)
                .map(|_| {
                    let data = (0..meta.frame_len()).map(|_| rng.uniform(0.0, 1.0)).collect();
                    Tensor::new(&[meta.channels, meta.height, meta.width], data)
                })
                .collect::<Result<_>>()?;
            let sampled = model.frame_indices().into_iter().map(|t| frames[t].clone()).collect();
            let flow = if variant.is_two_stream() {
                Some(flow_analog(&frames, meta.frames / 2, FLOW_DEPTH)?)
            } else {
                None
            };
            let inputs = ClipInputs { frames: sampled, flow };
            let label = rng.below(meta.classes());
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, |_| false);
            model.forward(&mut tape, &bind, &inputs)?;
            if tape.kink_margin() >= KINK_MARGIN {
                return Ok(GradcheckFixture {
                    model,
                    params,
                    inputs,
                    label,
                });
            }
        }
        Err(Error::InvalidConfig(format!(
            "no kink-free gradcheck fixture found for {}",
            variant.name()
        )))
    }

    /// Checks every parameter tensor; `fault` corrupts the analytic pass.
    pub fn check(&self, fault: Option<BackwardFault>) -> Result<Vec<TensorCheck>> {
        let make_tape = || match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        gradcheck::check_params(
            &self.params,
            |_| true,
            make_tape,
            |tape, bind| {
                let out = self.model.forward(tape, bind, &self.inputs)?;
                tape.cross_entropy(out.logits, self.label)
            },
            gradcheck::DEFAULT_STEP,
            GRADCHECK_TOLERANCE,
        )
    }
}

pub fn gradcheck_variant(variant: Variant, seed: u64) -> Result<Vec<TensorCheck>> {
    GradcheckFixture::new(variant, seed)?.check(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, ToyTaskConfig};

    fn tiny_data() -> (Dataset, Dataset) {
        let cfg = ToyTaskConfig {
            height: 12,
            width: 12,
            train_per_class: 1,
            test_per_class: 1,
            seed: 4,
            distractors: 1,
            ..Default::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    fn tiny_config(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::desk(variant);
        c.model.depth = 4;
        c.model.hidden = 2;
        c.model.categories = 4;
        c.model.frames = 3;
        c.stage1.epochs = 1;
        c.stage2.epochs = 1;
        c.pretrain.epochs = 1;
        c.batch_size = 5;
        c
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("lstm").is_err());
    }

    #[test]
    fn schedule_decays_at_boundaries() {
        let s = Schedule {
            optimizer: OptimizerKind::Adam,
            epochs: 10,
            lr: 1.0,
            decay_epochs: vec![2, 5],
            decay_factor: 0.5,
        };
        assert_eq!(s.lr_at(0), 1.0);
        assert_eq!(s.lr_at(2), 0.5);
        assert_eq!(s.lr_at(9), 0.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Adam, &ps);
        let g = vec![Tensor::new(&[2], vec![0.5, -2.0]).unwrap()];
        opt.step(&mut ps, &g, 0.1, &[true]).unwrap();
        let w = ps.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
        opt.step(&mut ps, &g, 0.1, &[false]).unwrap();
        assert_eq!(opt.steps, [1]);
    }

    #[test]
    fn confusion_accounting() {
        let mut c = Confusion::new(4);
        c.add(0, 0);
        c.add(1, 3);
        c.add(3, 2);
        c.add(2, 2);
        let (act, a, o) = c.accuracies(2, 2).unwrap();
        assert_eq!(act, 0.5);
        assert_eq!(a, 0.75);
        assert_eq!(o, 0.75);
        assert!(c.diff(&c).unwrap().iter().all(|&d| d == 0));
    }

    #[test]
    fn frozen_backbone_untouched_in_stage_one() {
        let (train_set, _) = tiny_data();
        let mut cfg = tiny_config(Variant::Lsta);
        cfg.stage2.epochs = 0;
        let out = train(&cfg, &train_set).unwrap();
        let (_, init) = Model::build(cfg.variant, &cfg.model, &train_set.meta, cfg.seed).unwrap();
        for (id, name, t) in init.iter() {
            let now = out.state.params.get(id);
            if name.contains(".backbone.") {
                assert_eq!(now, t, "{name}");
            }
        }
        assert_ne!(out.state.params, init);
    }

    #[test]
    fn two_stream_handoff_and_training_runs() {
        let (train_set, test_set) = tiny_data();
        let cfg = tiny_config(Variant::TwoStreamCrossModal);
        let out = train(&cfg, &train_set).unwrap();
        assert!(out.pretrain.as_ref().unwrap().pretrained);
        let r = evaluate(&out.model, &out.state.params, &test_set).unwrap();
        assert_eq!(r.confusion.total(), 20);
        assert!(r.activity_accuracy <= r.action_accuracy && r.activity_accuracy <= r.object_accuracy);
    }

    #[test]
    fn box_mass_of_uniform_map_is_area_fraction() {
        let map = Tensor::full(&[1, 4, 4], 1.0 / 16.0).unwrap();
        let b = BBox {
            top: 1,
            left: 3,
            height: 3,
            width: 3,
        };
        let m = box_mass(&map, 8, 8, &b).unwrap();
        assert!((m - 9.0 / 64.0).abs() < 1e-15);
    }
}
