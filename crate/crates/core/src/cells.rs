//! Convolutional LSTM and the LSTA cell.
//!
//! LSTA adds two things to a ConvLSTM: a recurrent attention track
//! (`a`, `s_gate`) that turns a class activation map of the input into a
//! softmax location map, and output pooling, where the output gate sees a
//! full-rank attention-filtered view of the fresh memory instead of the
//! input. Each part can be switched off; with everything off the cell is a
//! ConvLSTM with its gate stack split in two.
//!
//! The attention-filtered input is `N * s ⊙ x` for `N` locations: the map
//! is rescaled to mean one, so a uniform map passes `x` through unchanged
//! and switching attention off is the same as attending uniformly.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{Binding, ParamId, ParamSet};
use crate::pooling::{BiasController, PoolingModel, Selection};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `f * c_prev + i * innovation`.
pub fn memory_update(tape: &mut Tape, forget: Var, c_prev: Var, input: Var, innovation: Var) -> Result<Var> {
    let kept = tape.mul(forget, c_prev)?;
    let new = tape.mul(input, innovation)?;
    tape.add(kept, new)
}

/// `gate * tanh(memory)`, the hidden view fed back into the gates.
pub fn hidden(tape: &mut Tape, gate: Var, memory: Var) -> Result<Var> {
    let t = tape.tanh(memory);
    tape.mul(gate, t)
}

fn gate_bound(fan_in: usize) -> f64 {
    1.0 / math::sqrt(fan_in as f64)
}

/// A stack of gate convolutions: `kernel[C_out x C_in x k x k]`, `bias[C_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl GateConv {
    /// Uniform `+-1/sqrt(fan_in)` kernel; biases zero except `forget`
    /// channels, which start at +1.
    fn new(
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        forget: core::ops::Range<usize>,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let kernel = params.add_uniform(
            &format!("{name}.kernel"),
            &[c_out, c_in, k, k],
            gate_bound(c_in * k * k),
            rng,
        )?;
        let mut b = Tensor::zeros(&[c_out])?;
        b.data_mut()[forget].fill(1.0);
        let bias = params.add(&format!("{name}.bias"), b);
        Ok(GateConv { kernel, bias })
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, input: Var, extra: Option<Var>) -> Result<Var> {
        tape.conv2d_same(input, bind.var(self.kernel), bind.var(self.bias), extra)
    }
}

/// Input, forget and innovation activations of one LSTM-style update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateActivations {
    pub input: Var,
    pub forget: Var,
    pub innovation: Var,
}

// ---------------------------------------------------------------------------
// ConvLSTM

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstmState {
    pub c: Var,
    pub o: Var,
}

impl ConvLstmState {
    pub fn zeros(tape: &mut Tape, depth: usize, h: usize, w: usize) -> Result<Self> {
        let z = Tensor::zeros(&[depth, h, w])?;
        let c = tape.constant(z.clone());
        let o = tape.constant(z);
        Ok(ConvLstmState { c, o })
    }
}

/// Convolutional LSTM with gates `(i, f, o, c~)` from one `4K`-channel
/// convolution over `[x, o_prev * tanh(c_prev)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstmCell {
    pub input_depth: usize,
    pub depth: usize,
    pub kernel: usize,
    pub gates: GateConv,
}

impl ConvLstmCell {
    pub fn new(
        name: &str,
        input_depth: usize,
        depth: usize,
        kernel: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        let gates = GateConv::new(name, 4 * depth, input_depth + depth, kernel, depth..2 * depth, params, rng)?;
        Ok(ConvLstmCell {
            input_depth,
            depth,
            kernel,
            gates,
        })
    }

    /// Number of gate channels, the shape contract for external gate biases.
    pub fn gate_channels(&self) -> usize {
        4 * self.depth
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        state: ConvLstmState,
        gate_bias: Option<Var>,
    ) -> Result<(ConvLstmState, GateActivations)> {
        let k = self.depth;
        let (kx, _, _) = tape.shape(x).chw().unwrap_or((0, 0, 0));
        if kx != self.input_depth {
            return Err(Error::BadShape {
                op: "convlstm_step",
                expected: format!("{} input channels", self.input_depth),
                got: tape.shape(x),
            });
        }
        let h = hidden(tape, state.o, state.c)?;
        let joined = tape.concat(&[x, h])?;
        let pre = self.gates.apply(tape, bind, joined, gate_bias)?;
        let i_pre = tape.slice_channels(pre, 0, k)?;
        let f_pre = tape.slice_channels(pre, k, k)?;
        let o_pre = tape.slice_channels(pre, 2 * k, k)?;
        let c_pre = tape.slice_channels(pre, 3 * k, k)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let innovation = tape.tanh(c_pre);
        let c = memory_update(tape, f, state.c, i, innovation)?;
        Ok((
            ConvLstmState { c, o },
            GateActivations {
                input: i,
                forget: f,
                innovation,
            },
        ))
    }

    pub fn run_sequence(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        xs: &[Var],
        initial: ConvLstmState,
        gate_bias: Option<Var>,
    ) -> Result<(ConvLstmState, Vec<GateActivations>)> {
        if xs.is_empty() {
            return Err(Error::InvalidConfig("empty input sequence".to_string()));
        }
        let mut state = initial;
        let mut traces = Vec::with_capacity(xs.len());
        for &x in xs {
            let (next, gates) = self.step(tape, bind, x, state, gate_bias)?;
            state = next;
            traces.push(gates);
        }
        Ok((state, traces))
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        Err(Error::EvenKernel(k))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// LSTA

/// Shape and ablation switches of an LSTA cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellConfig {
    /// Memory depth K; the input must have K channels too.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Pooling category count C.
    pub categories: usize,
    pub kernel: usize,
    pub attention_pooling: bool,
    pub output_pooling: bool,
    pub bias_control: bool,
}

impl CellConfig {
    pub fn new(depth: usize, height: usize, width: usize, categories: usize) -> Self {
        CellConfig {
            depth,
            height,
            width,
            categories,
            kernel: 3,
            attention_pooling: true,
            output_pooling: true,
            bias_control: true,
        }
    }

    pub fn with_flags(mut self, attention_pooling: bool, output_pooling: bool, bias_control: bool) -> Self {
        self.attention_pooling = attention_pooling;
        self.output_pooling = output_pooling;
        self.bias_control = bias_control;
        self
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        check_kernel(self.kernel)?;
        if self.bias_control && !self.output_pooling {
            return Err(Error::InvalidConfig(
                "bias_control modifies the output-pooling selector and needs output_pooling".to_string(),
            ));
        }
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("cell extents must be positive".to_string()));
        }
        if (self.attention_pooling || self.output_pooling) && self.categories < 2 {
            return Err(Error::InvalidConfig("pooling needs at least 2 categories".to_string()));
        }
        Ok(())
    }

    /// Channel counts of the three gate stacks: attention, memory, output.
    pub fn gate_channels(&self) -> (usize, usize, usize) {
        (4, 3 * self.depth, self.depth)
    }
}

/// Recurrent variables of an LSTA cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstaState {
    /// Attention memory `[1 x H x W]`.
    pub a: Var,
    /// Attention output gate `[1 x H x W]`.
    pub s_gate: Var,
    pub c: Var,
    pub o: Var,
}

impl LstaState {
    pub fn zeros(tape: &mut Tape, cfg: &CellConfig) -> Result<Self> {
        let map = Tensor::zeros(&[1, cfg.height, cfg.width])?;
        let mem = Tensor::zeros(&[cfg.depth, cfg.height, cfg.width])?;
        Ok(LstaState {
            a: tape.constant(map.clone()),
            s_gate: tape.constant(map),
            c: tape.constant(mem.clone()),
            o: tape.constant(mem),
        })
    }
}

/// Optional per-position biases added to each gate convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateBiases {
    pub attention: Option<Var>,
    pub memory: Option<Var>,
    pub output: Option<Var>,
}

/// Result of the attention track for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionUpdate {
    pub nu_a: Var,
    pub s_map: Var,
    pub a: Var,
    pub s_gate: Var,
    pub gates: GateActivations,
    pub selection: Selection,
}

/// Everything one LSTA step computed, for inspection and export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTrace {
    pub nu_a: Option<Var>,
    pub s_map: Option<Var>,
    pub nu_c: Option<Var>,
    pub attended: Var,
    pub attention_gates: Option<GateActivations>,
    pub memory_gates: GateActivations,
    pub output_gate: Var,
    pub attention_selection: Option<Selection>,
    pub output_selection: Option<Selection>,
}

/// LSTA parameters. Components whose switch is off are not allocated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstaCell {
    pub config: CellConfig,
    /// Attention RNN: 4 single-channel gates over `[nu_a, s * tanh(a)]`.
    pub attention_gates: Option<GateConv>,
    /// `(i_c, f_c, c~)`: `3K` channels over `2K` inputs.
    pub memory_gates: GateConv,
    /// `K` channels over `2K` inputs.
    pub output_gate: GateConv,
    pub pool_a: Option<PoolingModel>,
    pub pool_c: Option<PoolingModel>,
    pub bias_ctrl: Option<BiasController>,
}

impl LstaCell {
    pub fn new(name: &str, config: CellConfig, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let (k, ks, c) = (config.depth, config.kernel, config.categories);
        let (attention_gates, pool_a) = if config.attention_pooling {
            let g = GateConv::new(&format!("{name}.w_a"), 4, 2, ks, 1..2, params, rng)?;
            let p = PoolingModel::new(&format!("{name}.pool_a.theta"), k, c, params, rng)?;
            (Some(g), Some(p))
        } else {
            (None, None)
        };
        let memory_gates = GateConv::new(&format!("{name}.w_c"), 3 * k, 2 * k, ks, k..2 * k, params, rng)?;
        let output_gate = GateConv::new(&format!("{name}.w_o"), k, 2 * k, ks, 0..0, params, rng)?;
        let pool_c = if config.output_pooling {
            Some(PoolingModel::new(&format!("{name}.pool_c.theta"), k, c, params, rng)?)
        } else {
            None
        };
        let bias_ctrl = if config.bias_control {
            Some(BiasController::new(&format!("{name}.bias_ctrl.w_o"), c, params, rng)?)
        } else {
            None
        };
        Ok(LstaCell {
            config,
            attention_gates,
            memory_gates,
            output_gate,
            pool_a,
            pool_c,
            bias_ctrl,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let cfg = &self.config;
        if tape.shape(x).dims() != [cfg.depth, cfg.height, cfg.width] {
            return Err(Error::BadShape {
                op: "lsta_step",
                expected: format!("[{}x{}x{}] input", cfg.depth, cfg.height, cfg.width),
                got: tape.shape(x),
            });
        }
        Ok(())
    }

    /// Attention track: `nu_a` from attention pooling, an LSTM update of the
    /// attention memory, and the softmax map `s`.
    pub fn attention_update(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        state: &LstaState,
        gate_bias: Option<Var>,
    ) -> Result<AttentionUpdate> {
        let (Some(gates), Some(pool)) = (self.attention_gates, self.pool_a) else {
            return Err(Error::InvalidConfig("attention pooling is switched off".to_string()));
        };
        self.check_input(tape, x)?;
        let (nu_a, selection) = pool.attention_map(tape, bind, x)?;
        let h = hidden(tape, state.s_gate, state.a)?;
        let joined = tape.concat(&[nu_a, h])?;
        let pre = gates.apply(tape, bind, joined, gate_bias)?;
        let i_pre = tape.slice_channels(pre, 0, 1)?;
        let f_pre = tape.slice_channels(pre, 1, 1)?;
        let s_pre = tape.slice_channels(pre, 2, 1)?;
        let a_pre = tape.slice_channels(pre, 3, 1)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let s_gate = tape.sigmoid(s_pre);
        let innovation = tape.tanh(a_pre);
        let a = memory_update(tape, f, state.a, i, innovation)?;
        let residual = hidden(tape, s_gate, a)?;
        let logits = tape.add(nu_a, residual)?;
        let s_map = tape.softmax_locations(logits)?;
        Ok(AttentionUpdate {
            nu_a,
            s_map,
            a,
            s_gate,
            gates: GateActivations {
                input: i,
                forget: f,
                innovation,
            },
            selection,
        })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        state: &LstaState,
        biases: &GateBiases,
    ) -> Result<(LstaState, StepTrace)> {
        self.check_input(tape, x)?;
        let k = self.config.depth;

        let (attended, att, a, s_gate) = if self.config.attention_pooling {
            let u = self.attention_update(tape, bind, x, state, biases.attention)?;
            let filtered = tape.mul(x, u.s_map)?;
            let n = self.config.locations() as f64;
            (tape.scale(filtered, n), Some(u), u.a, u.s_gate)
        } else {
            (x, None, state.a, state.s_gate)
        };

        let h = hidden(tape, state.o, state.c)?;
        let joined = tape.concat(&[attended, h])?;
        let pre = self.memory_gates.apply(tape, bind, joined, biases.memory)?;
        let i_pre = tape.slice_channels(pre, 0, k)?;
        let f_pre = tape.slice_channels(pre, k, k)?;
        let c_pre = tape.slice_channels(pre, 2 * k, k)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let innovation = tape.tanh(c_pre);
        let c = memory_update(tape, f, state.c, i, innovation)?;

        let (gate_input, nu_c, output_selection) = match self.pool_c {
            Some(pool) => {
                let bias = match self.bias_ctrl {
                    Some(ctrl) => Some(ctrl.instance_bias(tape, bind, attended, &pool)?),
                    None => None,
                };
                let (nu_c, sel) = pool.attention_map_fullrank(tape, bind, c, bias)?;
                (tape.mul(nu_c, c)?, Some(nu_c), Some(sel))
            }
            None => (attended, None, None),
        };
        let joined_o = tape.concat(&[gate_input, h])?;
        let o_pre = self.output_gate.apply(tape, bind, joined_o, biases.output)?;
        let o = tape.sigmoid(o_pre);

        let trace = StepTrace {
            nu_a: att.map(|u| u.nu_a),
            s_map: att.map(|u| u.s_map),
            nu_c,
            attended,
            attention_gates: att.map(|u| u.gates),
            memory_gates: GateActivations {
                input: i,
                forget: f,
                innovation,
            },
            output_gate: o,
            attention_selection: att.map(|u| u.selection),
            output_selection,
        };
        Ok((LstaState { a, s_gate, c, o }, trace))
    }

    pub fn run_sequence(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        xs: &[Var],
        initial: LstaState,
        biases: &GateBiases,
    ) -> Result<(LstaState, Vec<StepTrace>)> {
        if xs.is_empty() {
            return Err(Error::InvalidConfig("empty input sequence".to_string()));
        }
        let mut state = initial;
        let mut traces = Vec::with_capacity(xs.len());
        for &x in xs {
            let (next, trace) = self.step(tape, bind, x, &state, biases)?;
            state = next;
            traces.push(trace);
        }
        Ok((state, traces))
    }

    /// The equivalent single-stack ConvLSTM weights `(kernel[4K x 2K x k x
    /// k], bias[4K])`, gate order `(i, f, o, c~)`.
    pub fn convlstm_weights(&self, params: &ParamSet) -> Result<(Tensor, Tensor)> {
        let k = self.config.depth;
        let ks = self.config.kernel;
        let per_out = 2 * k * ks * ks;
        let wc = params.get(self.memory_gates.kernel).data();
        let wo = params.get(self.output_gate.kernel).data();
        let bc = params.get(self.memory_gates.bias).data();
        let bo = params.get(self.output_gate.bias).data();
        let mut w = Vec::with_capacity(4 * k * per_out);
        w.extend_from_slice(&wc[..2 * k * per_out]);
        w.extend_from_slice(wo);
        w.extend_from_slice(&wc[2 * k * per_out..]);
        let mut b = Vec::with_capacity(4 * k);
        b.extend_from_slice(&bc[..2 * k]);
        b.extend_from_slice(bo);
        b.extend_from_slice(&bc[2 * k..]);
        Ok((Tensor::new(&[4 * k, 2 * k, ks, ks], w)?, Tensor::new(&[4 * k], b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut SplitMix64, dims: &[usize], scale: f64) -> Tensor {
        let mut t = Tensor::zeros(dims).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-scale, scale));
        t
    }

    #[test]
    fn bias_control_without_output_pooling_is_rejected() {
        let cfg = CellConfig::new(2, 3, 3, 3).with_flags(true, false, true);
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(0);
        assert!(matches!(
            LstaCell::new("lsta", cfg, &mut ps, &mut rng),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_everything_convlstm_step() {
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(0);
        let cell = ConvLstmCell::new("clstm", 2, 3, 3, &mut ps, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            let z = ps.get(id).zeros_like();
            ps.set(id, z).unwrap();
        }
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]).unwrap());
        let s0 = ConvLstmState::zeros(&mut tape, 3, 4, 4).unwrap();
        let (s1, _) = cell.step(&mut tape, &bind, x, s0, None).unwrap();
        assert!(tape.value(s1.c).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(s1.o).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(4);
        let cell = ConvLstmCell::new("clstm", 2, 2, 3, &mut ps, &mut rng).unwrap();
        let mut b = Tensor::zeros(&[8]).unwrap();
        b.data_mut()[0..2].fill(-30.0); // input gate closed
        b.data_mut()[2..4].fill(30.0); // forget gate open
        ps.set(cell.gates.bias, b).unwrap();
        let k = ps.get(cell.gates.kernel).clone();
        let mut small = k.clone();
        small.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        ps.set(cell.gates.kernel, small).unwrap();

        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let c0 = tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0));
        let o0 = tape.constant(Tensor::full(&[2, 3, 3], 0.5).unwrap());
        let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0));
        let (s1, _) = cell
            .step(&mut tape, &bind, x, ConvLstmState { c: c0, o: o0 }, None)
            .unwrap();
        assert!(tape.value(s1.c).max_abs_diff(tape.value(c0)) <= 1e-9);
    }

    #[test]
    fn memory_algebra_under_injected_gates() {
        let mut rng = SplitMix64::new(9);
        let mut tape = Tape::new();
        let c_prev = tape.constant(rand_tensor(&mut rng, &[2, 2, 2], 2.0));
        let innov = tape.constant(rand_tensor(&mut rng, &[2, 2, 2], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2, 2, 2]).unwrap());
        let one = tape.constant(Tensor::full(&[2, 2, 2], 1.0).unwrap());
        let erased = memory_update(&mut tape, zero, c_prev, zero, innov).unwrap();
        assert!(tape.value(erased).data().iter().all(|&v| v.abs() <= 1e-12));
        let reset = memory_update(&mut tape, zero, c_prev, one, innov).unwrap();
        assert!(tape.value(reset).max_abs_diff(tape.value(innov)) <= 1e-12);
        let kept = memory_update(&mut tape, one, c_prev, zero, innov).unwrap();
        assert!(tape.value(kept).max_abs_diff(tape.value(c_prev)) <= 1e-9);
    }

    #[test]
    fn attention_update_needs_the_flag() {
        let cfg = CellConfig::new(2, 3, 3, 3).with_flags(false, true, false);
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(0);
        let cell = LstaCell::new("lsta", cfg, &mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let st = LstaState::zeros(&mut tape, &cfg).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 3, 3]).unwrap());
        assert!(cell.attention_update(&mut tape, &bind, x, &st, None).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let cfg = CellConfig::new(2, 3, 3, 3);
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(0);
        let cell = LstaCell::new("lsta", cfg, &mut ps, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            let z = ps.get(id).zeros_like();
            ps.set(id, z).unwrap();
        }
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let st = LstaState::zeros(&mut tape, &cfg).unwrap();
        let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0));
        let u = cell.attention_update(&mut tape, &bind, x, &st, None).unwrap();
        assert!(tape
            .value(u.s_map)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn zero_input_leaves_only_recurrent_terms() {
        let cfg = CellConfig::new(2, 3, 3, 3);
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(5);
        let cell = LstaCell::new("lsta", cfg, &mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let st = LstaState {
            a: tape.constant(rand_tensor(&mut rng, &[1, 3, 3], 1.0)),
            s_gate: tape.constant(rand_tensor(&mut rng, &[1, 3, 3], 1.0)),
            c: tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0)),
            o: tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0)),
        };
        let x = tape.constant(Tensor::zeros(&[2, 3, 3]).unwrap());
        let (s1, tr) = cell.step(&mut tape, &bind, x, &st, &GateBiases::default()).unwrap();
        assert!(tape.value(tr.attended).data().iter().all(|&v| v == 0.0));

        // same memory as a step on an all-zero input without attention
        let zeros = tape.constant(Tensor::zeros(&[2, 3, 3]).unwrap());
        let h = hidden(&mut tape, st.o, st.c).unwrap();
        let j = tape.concat(&[zeros, h]).unwrap();
        let pre = cell.memory_gates.apply(&mut tape, &bind, j, None).unwrap();
        let i = tape.slice_channels(pre, 0, 2).unwrap();
        let f = tape.slice_channels(pre, 2, 2).unwrap();
        let g = tape.slice_channels(pre, 4, 2).unwrap();
        let (i, f, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g));
        let c = memory_update(&mut tape, f, st.c, i, g).unwrap();
        assert!(tape.value(c).max_abs_diff(tape.value(s1.c)) <= 1e-15);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let cfg = CellConfig::new(2, 3, 3, 3);
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(0);
        let cell = LstaCell::new("lsta", cfg, &mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let st = LstaState::zeros(&mut tape, &cfg).unwrap();
        assert!(cell
            .run_sequence(&mut tape, &bind, &[], st, &GateBiases::default())
            .is_err());
    }
}
