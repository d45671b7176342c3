//! Two-stream activity recognition at desk scale.
//!
//! The appearance stream runs a small convolutional backbone on every frame,
//! feeds the features to an LSTA cell and classifies the final memory. The
//! motion stream classifies a stack of frame-difference channels with
//! attention pooling seeded from an action classifier. In cross-modal mode
//! each stream biases the gates of the other: the flow feature biases the
//! LSTA gates through a 1x1 convolution, and a 3-D convolution summary of
//! the appearance features biases a ConvLSTM embedding in the motion stream.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::cells::{CellConfig, ConvLstmCell, ConvLstmState, GateBiases, LstaCell, LstaState, StepTrace};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Binding, ParamId, ParamSet};
use crate::pooling::{PoolingModel, Selection};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frames of temporal differences stacked by the motion stream.
pub const FLOW_DEPTH: usize = 5;

/// A convolution with kernel `[C_out x C_in x k x k]` and bias `[C_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    fn new(
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        bound: f64,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let kernel = params.add_uniform(&format!("{name}.kernel"), &[c_out, c_in, k, k], bound, rng)?;
        let bias = params.add_full(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Conv { kernel, bias })
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d_same(x, bind.var(self.kernel), bind.var(self.bias), None)
    }
}

/// `weight[out x in] * x + bias`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(name: &str, out: usize, inp: usize, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<Self> {
        let bound = 1.0 / math::sqrt(inp as f64);
        let weight = params.add_uniform(&format!("{name}.weight"), &[out, inp], bound, rng)?;
        let bias = params.add_full(&format!("{name}.bias"), &[out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matvec(bind.var(self.weight), x, false)?;
        tape.add(y, bind.var(self.bias))
    }
}

// ---------------------------------------------------------------------------
// Backbone

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
}

/// conv -> relu -> 2x2 average pool -> conv -> relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Backbone {
    /// He-uniform kernels, zero biases.
    pub fn new(name: &str, config: BackboneConfig, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<Self> {
        let k = config.kernel;
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        let he = |fan_in: usize| math::sqrt(6.0 / fan_in as f64);
        let conv1 = Conv::new(
            &format!("{name}.conv1"),
            config.hidden,
            config.in_channels,
            k,
            he(config.in_channels * k * k),
            params,
            rng,
        )?;
        let conv2 = Conv::new(
            &format!("{name}.conv2"),
            config.depth,
            config.hidden,
            k,
            he(config.hidden * k * k),
            params,
            rng,
        )?;
        Ok(Backbone { config, conv1, conv2 })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, frame: Var) -> Result<Var> {
        let y = self.conv1.apply(tape, bind, frame)?;
        let y = tape.relu(y);
        let y = tape.avg_pool2(y)?;
        let y = self.conv2.apply(tape, bind, y)?;
        Ok(tape.relu(y))
    }

    /// Copies `source`'s first-layer kernel averaged over its input channels
    /// and replicated across this backbone's input channels.
    pub fn init_conv1_from(&self, params: &mut ParamSet, source: &Tensor) -> Result<()> {
        let dst_shape = params.get(self.conv1.kernel).shape();
        let (co, ci_dst, k) = match *dst_shape.dims() {
            [co, ci, k, _] => (co, ci, k),
            _ => unreachable!("conv kernels are rank 4"),
        };
        let (sco, sci) = match *source.dims() {
            [a, b, kk, _] if a == co && kk == k => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "init_conv1_from",
                    left: dst_shape,
                    right: source.shape(),
                })
            }
        };
        let kk = k * k;
        let mut out = Vec::with_capacity(co * ci_dst * kk);
        for o in 0..sco {
            let mut mean = alloc::vec![0.0; kk];
            for i in 0..sci {
                let base = (o * sci + i) * kk;
                for j in 0..kk {
                    mean[j] += source.data()[base + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= sci as f64);
            for _ in 0..ci_dst {
                out.extend_from_slice(&mean);
            }
        }
        params.set(self.conv1.kernel, Tensor::from_shape(dst_shape, out)?)
    }
}

// ---------------------------------------------------------------------------
// Appearance stream

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AppearanceStream {
    pub backbone: Backbone,
    pub cell: LstaCell,
    pub classifier: Linear,
}

/// Output of one appearance pass.
#[derive(Clone, Debug)]
pub struct AppearanceOutput {
    pub logits: Var,
    pub features: Vec<Var>,
    pub state: LstaState,
    pub traces: Vec<StepTrace>,
}

impl AppearanceStream {
    pub fn new(
        name: &str,
        backbone: BackboneConfig,
        cell: CellConfig,
        classes: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if backbone.depth != cell.depth {
            return Err(Error::InvalidConfig(format!(
                "backbone depth {} differs from memory depth {}",
                backbone.depth, cell.depth
            )));
        }
        let backbone = Backbone::new(&format!("{name}.backbone"), backbone, params, rng)?;
        let cell = LstaCell::new(&format!("{name}.lsta"), cell, params, rng)?;
        let classifier = Linear::new(&format!("{name}.classifier"), classes, cell.config.depth, params, rng)?;
        Ok(AppearanceStream {
            backbone,
            cell,
            classifier,
        })
    }

    pub fn features(&self, tape: &mut Tape, bind: &Binding, frames: &[Var]) -> Result<Vec<Var>> {
        frames.iter().map(|&f| self.backbone.forward(tape, bind, f)).collect()
    }

    /// Runs the cell over precomputed features and classifies `avg(c_T)`.
    pub fn head(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        features: Vec<Var>,
        biases: &GateBiases,
    ) -> Result<AppearanceOutput> {
        let init = LstaState::zeros(tape, &self.cell.config)?;
        let (state, traces) = self.cell.run_sequence(tape, bind, &features, init, biases)?;
        let pooled = tape.spatial_average(state.c)?;
        let logits = self.classifier.apply(tape, bind, pooled)?;
        Ok(AppearanceOutput {
            logits,
            features,
            state,
            traces,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        frames: &[Var],
        biases: &GateBiases,
    ) -> Result<AppearanceOutput> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("appearance stream needs at least one frame".to_string()));
        }
        let features = self.features(tape, bind, frames)?;
        self.head(tape, bind, features, biases)
    }
}

// ---------------------------------------------------------------------------
// Motion stream

/// Stacks `depth` signed motion estimates from the `depth + 1` frames
/// centred on `center`, two channels per frame pair.
///
/// For consecutive frames `f, g` (channel-averaged), with `d = g - f` and
/// `m = (f + g) / 2`, the pair contributes `d * dm/dx` and `d * dm/dy`
/// (central differences, replicated borders). For a translating pattern
/// these are the normal-flow numerators `-(v . grad m) dm/dx` and
/// `-(v . grad m) dm/dy`, so horizontal motion loads the x channel.
pub fn flow_analog(frames: &[Tensor], center: usize, depth: usize) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::OutOfRange {
        what: "flow window start",
        index: 0,
        bound: 0,
    })?;
    let (c, h, w) = first.shape().chw().ok_or_else(|| Error::BadShape {
        op: "flow_analog",
        expected: "[C x H x W] frames".to_string(),
        got: first.shape(),
    })?;
    let start = center.checked_sub(depth / 2).ok_or(Error::OutOfRange {
        what: "flow window center",
        index: center,
        bound: frames.len(),
    })?;
    if start + depth >= frames.len() {
        return Err(Error::OutOfRange {
            what: "flow window end",
            index: start + depth,
            bound: frames.len(),
        });
    }
    let hw = h * w;
    let gray = |t: &Tensor| -> Vec<f64> {
        let mut g = alloc::vec![0.0; hw];
        for plane in t.data().chunks_exact(hw) {
            for (a, b) in g.iter_mut().zip(plane) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|v| *v /= c as f64);
        g
    };
    let mut out = Vec::with_capacity(2 * depth * hw);
    for j in 0..depth {
        let f = gray(&frames[start + j]);
        let g = gray(&frames[start + j + 1]);
        let m: Vec<f64> = f.iter().zip(&g).map(|(a, b)| 0.5 * (a + b)).collect();
        let d: Vec<f64> = f.iter().zip(&g).map(|(a, b)| b - a).collect();
        let at = |y: usize, x: usize| m[y * w + x];
        let mut xs = alloc::vec![0.0; hw];
        let mut ys = alloc::vec![0.0; hw];
        for y in 0..h {
            for x in 0..w {
                let gx = 0.5 * (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)));
                let gy = 0.5 * (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x));
                xs[y * w + x] = d[y * w + x] * gx;
                ys[y * w + x] = d[y * w + x] * gy;
            }
        }
        out.extend_from_slice(&xs);
        out.extend_from_slice(&ys);
    }
    Tensor::new(&[2 * depth, h, w], out)
}

/// Motion stream: flow backbone, attention pooling over its features, an
/// optional ConvLSTM embedding, and a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MotionStream {
    pub backbone: Backbone,
    pub pool: PoolingModel,
    pub embedding: Option<ConvLstmCell>,
    pub classifier: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MotionOutput {
    pub logits: Var,
    pub feature: Var,
    pub s_map: Var,
    pub selection: Selection,
}

impl MotionStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        backbone: BackboneConfig,
        categories: usize,
        with_embedding: bool,
        classes: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let k = backbone.depth;
        let kernel = backbone.kernel;
        let backbone = Backbone::new(&format!("{name}.backbone"), backbone, params, rng)?;
        let pool = PoolingModel::new(&format!("{name}.pool.theta"), k, categories, params, rng)?;
        let embedding = if with_embedding {
            Some(ConvLstmCell::new(&format!("{name}.embedding"), k, k, kernel, params, rng)?)
        } else {
            None
        };
        let classifier = Linear::new(&format!("{name}.classifier"), classes, k, params, rng)?;
        Ok(MotionStream {
            backbone,
            pool,
            embedding,
            classifier,
        })
    }

    /// Classifies a flow feature. `gate_bias` reaches the embedding cell.
    pub fn head(&self, tape: &mut Tape, bind: &Binding, feature: Var, gate_bias: Option<Var>) -> Result<MotionOutput> {
        let (nu, selection) = self.pool.attention_map(tape, bind, feature)?;
        let s_map = tape.softmax_locations(nu)?;
        let n = s_map_locations(tape, s_map);
        let weighted = tape.mul(feature, s_map)?;
        let weighted = tape.scale(weighted, n as f64);
        let pooled = match self.embedding {
            Some(cell) => {
                let (_, h, w) = tape.shape(feature).chw().unwrap_or((0, 0, 0));
                let init = ConvLstmState::zeros(tape, cell.depth, h, w)?;
                let (state, _) = cell.step(tape, bind, weighted, init, gate_bias)?;
                tape.spatial_average(state.c)?
            }
            None => {
                if gate_bias.is_some() {
                    return Err(Error::InvalidConfig(
                        "gate bias given to a motion stream without embedding".to_string(),
                    ));
                }
                tape.spatial_average(weighted)?
            }
        };
        let logits = self.classifier.apply(tape, bind, pooled)?;
        Ok(MotionOutput {
            logits,
            feature,
            s_map,
            selection,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, flow: Var, gate_bias: Option<Var>) -> Result<MotionOutput> {
        let feature = self.backbone.forward(tape, bind, flow)?;
        self.head(tape, bind, feature, gate_bias)
    }
}

fn s_map_locations(tape: &Tape, s_map: Var) -> usize {
    tape.shape(s_map).volume()
}

/// Flow backbone plus an action classifier `theta^T avg(f) + b`, trained
/// on verbs before its `theta` seeds the motion stream's attention pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionPretrainer {
    pub backbone: Backbone,
    pub theta: ParamId,
    pub bias: ParamId,
}

impl ActionPretrainer {
    pub fn new(
        name: &str,
        backbone: BackboneConfig,
        actions: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let k = backbone.depth;
        let backbone = Backbone::new(&format!("{name}.backbone"), backbone, params, rng)?;
        let theta = params.add_uniform(&format!("{name}.head.theta"), &[k, actions], 1.0 / math::sqrt(k as f64), rng)?;
        let bias = params.add_full(&format!("{name}.head.bias"), &[actions], 0.0)?;
        Ok(ActionPretrainer { backbone, theta, bias })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, flow: Var) -> Result<Var> {
        let f = self.backbone.forward(tape, bind, flow)?;
        crate::pooling::category_scores(tape, f, bind.var(self.theta), Some(bind.var(self.bias)))
    }

    /// Copies the pretrained backbone and classifier weights into `motion`.
    pub fn handoff(&self, pre: &ParamSet, motion: &MotionStream, dst: &mut ParamSet) -> Result<()> {
        let pairs = [
            (self.backbone.conv1.kernel, motion.backbone.conv1.kernel),
            (self.backbone.conv1.bias, motion.backbone.conv1.bias),
            (self.backbone.conv2.kernel, motion.backbone.conv2.kernel),
            (self.backbone.conv2.bias, motion.backbone.conv2.bias),
            (self.theta, motion.pool.theta),
        ];
        for (src, d) in pairs {
            dst.set(d, pre.get(src).clone())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fusion

/// Mean of two logit vectors.
pub fn two_stream_fuse(tape: &mut Tape, rgb: Var, flow: Var) -> Result<Var> {
    if tape.shape(rgb) != tape.shape(flow) {
        return Err(Error::ShapeMismatch {
            op: "two_stream_fuse",
            left: tape.shape(rgb),
            right: tape.shape(flow),
        });
    }
    let s = tape.add(rgb, flow)?;
    Ok(tape.scale(s, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    LateAverage,
    CrossModal,
}

/// Which LSTA gate stacks receive the flow bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowBiasGates {
    All,
    MemoryOnly,
}

/// 3-D convolution over `(time, height, width)` followed by a mean over the
/// remaining time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Summarizer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub temporal: usize,
}

impl Summarizer {
    pub fn new(
        name: &str,
        depth: usize,
        temporal: usize,
        spatial: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let fan_in = depth * temporal * spatial * spatial;
        let kernel = params.add_uniform(
            &format!("{name}.kernel"),
            &[depth, depth, temporal, spatial, spatial],
            1.0 / math::sqrt(fan_in as f64),
            rng,
        )?;
        let bias = params.add_full(&format!("{name}.bias"), &[depth], 0.0)?;
        Ok(Summarizer {
            kernel,
            bias,
            temporal,
        })
    }

    pub fn summarize(&self, tape: &mut Tape, bind: &Binding, features: &[Var]) -> Result<Var> {
        summarize_rgb_sequence(tape, features, bind.var(self.kernel), bind.var(self.bias))
    }
}

/// `mean_t conv3d(stack(features))`: `T x [K x H x W] -> [K x H x W]`.
pub fn summarize_rgb_sequence(tape: &mut Tape, features: &[Var], kernel: Var, bias: Var) -> Result<Var> {
    let stacked = tape.stack(features)?;
    let conv = tape.conv3d(stacked, kernel, bias)?;
    tape.mean_leading(conv)
}

/// Cross-modal couplers of a [`TwoStreamModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Couplers {
    /// 1x1 convolution from the flow feature to every LSTA gate channel.
    pub flow_to_lsta: Conv,
    pub summarizer: Summarizer,
    /// 1x1 convolution from the appearance summary to the ConvLSTM gates.
    pub summary_to_clstm: Conv,
    pub flow_gates: FlowBiasGates,
}

impl Couplers {
    /// Splits the projected flow feature into per-stack LSTA gate biases.
    pub fn appearance_biases(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        flow_feature: Var,
        cell: &CellConfig,
    ) -> Result<GateBiases> {
        crossmodal_bias_appearance(tape, bind, flow_feature, &self.flow_to_lsta, cell, self.flow_gates)
    }
}

/// Gate-bias tensors for the LSTA gate stacks from a flow feature.
pub fn crossmodal_bias_appearance(
    tape: &mut Tape,
    bind: &Binding,
    flow_feature: Var,
    coupler: &Conv,
    cell: &CellConfig,
    gates: FlowBiasGates,
) -> Result<GateBiases> {
    let (na, nm, no) = cell.gate_channels();
    let all = coupler.apply(tape, bind, flow_feature)?;
    let total = tape.shape(all).chw().map(|(c, _, _)| c).unwrap_or(0);
    let want = if cell.attention_pooling { na + nm + no } else { nm + no };
    if total != want {
        return Err(Error::BadShape {
            op: "crossmodal_bias_appearance",
            expected: format!("{want} gate channels"),
            got: tape.shape(all),
        });
    }
    let mut off = 0;
    let attention = if cell.attention_pooling {
        off = na;
        Some(tape.slice_channels(all, 0, na)?)
    } else {
        None
    };
    let memory = Some(tape.slice_channels(all, off, nm)?);
    let output = Some(tape.slice_channels(all, off + nm, no)?);
    Ok(match gates {
        FlowBiasGates::All => GateBiases {
            attention,
            memory,
            output,
        },
        FlowBiasGates::MemoryOnly => GateBiases {
            attention: None,
            memory,
            output: None,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwoStreamModel {
    pub appearance: AppearanceStream,
    pub motion: MotionStream,
    pub mode: FusionMode,
    pub couplers: Option<Couplers>,
}

#[derive(Clone, Debug)]
pub struct TwoStreamOutput {
    pub logits: Var,
    pub rgb: AppearanceOutput,
    pub flow: MotionOutput,
}

impl TwoStreamModel {
    /// Adds cross-modal couplers for `mode == CrossModal`. The 1x1 coupler
    /// kernels start at zero, so a fresh cross-modal model computes exactly
    /// what its late-average counterpart does.
    pub fn new(
        appearance: AppearanceStream,
        motion: MotionStream,
        mode: FusionMode,
        flow_gates: FlowBiasGates,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let couplers = match mode {
            FusionMode::LateAverage => None,
            FusionMode::CrossModal => {
                let Some(embedding) = motion.embedding else {
                    return Err(Error::InvalidConfig(
                        "cross-modal fusion needs the motion ConvLSTM embedding".to_string(),
                    ));
                };
                let cell = appearance.cell.config;
                let (na, nm, no) = cell.gate_channels();
                let n_gates = if cell.attention_pooling { na + nm + no } else { nm + no };
                let k_flow = motion.backbone.config.depth;
                let k_rgb = cell.depth;
                let flow_to_lsta = Conv::new("couplers.flow_to_lsta", n_gates, k_flow, 1, 0.0, params, rng)?;
                let summarizer = Summarizer::new("couplers.summarizer", k_rgb, 3, 3, params, rng)?;
                let summary_to_clstm =
                    Conv::new("couplers.summary_to_clstm", embedding.gate_channels(), k_rgb, 1, 0.0, params, rng)?;
                Some(Couplers {
                    flow_to_lsta,
                    summarizer,
                    summary_to_clstm,
                    flow_gates,
                })
            }
        };
        Ok(TwoStreamModel {
            appearance,
            motion,
            mode,
            couplers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, frames: &[Var], flow: Var) -> Result<TwoStreamOutput> {
        let features = self.appearance.features(tape, bind, frames)?;
        let flow_feature = self.motion.backbone.forward(tape, bind, flow)?;
        let (rgb_biases, clstm_bias) = match (&self.mode, &self.couplers) {
            (FusionMode::CrossModal, Some(c)) => {
                let b = c.appearance_biases(tape, bind, flow_feature, &self.appearance.cell.config)?;
                let summary = c.summarizer.summarize(tape, bind, &features)?;
                let cb = c.summary_to_clstm.apply(tape, bind, summary)?;
                (b, Some(cb))
            }
            _ => (GateBiases::default(), None),
        };
        let rgb = self.appearance.head(tape, bind, features, &rgb_biases)?;
        let flow = self.motion.head(tape, bind, flow_feature, clstm_bias)?;
        let logits = two_stream_fuse(tape, rgb.logits, flow.logits)?;
        Ok(TwoStreamOutput { logits, rgb, flow })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn fusion_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![3.0, 1.0]).unwrap());
        let f = two_stream_fuse(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(f).data(), &[2.0, 2.0]);
        let same = two_stream_fuse(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 3.0]);
        let neg = tape.constant(Tensor::new(&[2], vec![-1.0, -3.0]).unwrap());
        let z = two_stream_fuse(&mut tape, a, neg).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
        let short = tape.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        assert!(two_stream_fuse(&mut tape, a, short).is_err());
    }

    #[test]
    fn static_sequence_has_zero_flow() {
        let f = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let frames = vec![f; 8];
        let flow = flow_analog(&frames, 4, FLOW_DEPTH).unwrap();
        assert_eq!(flow.dims(), &[10, 4, 4]);
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_window_out_of_range() {
        let frames = vec![Tensor::zeros(&[1, 4, 4]).unwrap(); 6];
        assert!(flow_analog(&frames, 1, 5).is_err());
        assert!(flow_analog(&frames, 4, 5).is_err());
        assert!(flow_analog(&frames, 2, 5).is_ok());
    }

    #[test]
    fn conv1_init_averages_and_replicates() {
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(2);
        let cfg = BackboneConfig {
            in_channels: 4,
            hidden: 2,
            depth: 3,
            kernel: 3,
        };
        let bb = Backbone::new("m", cfg, &mut ps, &mut rng).unwrap();
        let src = Tensor::new(&[2, 2, 3, 3], (0..36).map(|i| i as f64).collect()).unwrap();
        bb.init_conv1_from(&mut ps, &src).unwrap();
        let k = ps.get(bb.conv1.kernel);
        // output 0, every input channel: mean of source channels 0 and 1
        for ci in 0..4 {
            for j in 0..9 {
                assert_eq!(k.data()[ci * 9 + j], (j as f64 + (9 + j) as f64) / 2.0);
            }
        }
    }
}
