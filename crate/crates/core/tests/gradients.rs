//! Analytic gradients against central finite differences.

use lsta_core::cells::{CellConfig, GateBiases, LstaCell, LstaState};
use lsta_core::gradcheck::{self, finite_diff_grad, max_relative_error, DEFAULT_STEP};
use lsta_core::tape::{BackwardFault, OpKind};
use lsta_core::train::{gradcheck_model_config, FlowGates, GradcheckFixture, Variant, GRADCHECK_TOLERANCE};
use lsta_core::{ParamSet, Result, SplitMix64, Tape, Tensor, Var};

fn rand_tensor(rng: &mut SplitMix64, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Checks d/d(inputs) of `sum(r * f(inputs))` for a random weighting `r`.
fn check_op(inputs: &[Tensor], rng: &mut SplitMix64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let weights = {
        let mut t = Tape::new();
        let vs: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs).unwrap();
        let dims = t.value(y).dims().to_vec();
        rand_tensor(rng, &dims, -1.0, 1.0)
    };
    let loss = |t: &mut Tape, vs: &[Var]| -> f64 {
        let y = f(t, vs).unwrap();
        let r = t.constant(weights.clone());
        let p = t.mul(y, r).unwrap();
        let s = t.sum(p);
        t.value(s).item().unwrap()
    };

    let mut tape = Tape::new();
    let vs: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vs).unwrap();
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vs[i]).unwrap_or_else(|| x.zeros_like());
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == i { probe.clone() } else { v.clone() }))
                    .collect();
                loss(&mut t, &vs)
            },
            x,
            DEFAULT_STEP,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= GRADCHECK_TOLERANCE, "input {i}: rel err {err:e}");
    }
}

/// Values bounded away from zero so ReLU stays off its kink.
fn away_from_zero(rng: &mut SplitMix64, dims: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, dims, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.below(2) == 0 {
            *v = -*v;
        }
    }
    t
}

#[test]
fn pointwise_primitives() {
    let mut rng = SplitMix64::new(1);
    for _ in 0..50 {
        let a = rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[1, 2, 4], -2.0, 2.0);
        check_op(&[a.clone(), b.clone()], &mut rng, |t, v| t.add(v[0], v[1]));
        check_op(&[a.clone(), b], &mut rng, |t, v| t.mul(v[0], v[1]));
        check_op(&[a.clone(), m.clone()], &mut rng, |t, v| t.mul(v[0], v[1]));
        check_op(&[a.clone(), m], &mut rng, |t, v| t.add(v[0], v[1]));
        check_op(&[a.clone()], &mut rng, |t, v| Ok(t.scale(v[0], -1.7)));
        check_op(&[a.clone()], &mut rng, |t, v| Ok(t.sigmoid(v[0])));
        check_op(&[a], &mut rng, |t, v| Ok(t.tanh(v[0])));
        let r = away_from_zero(&mut rng, &[2, 3, 3]);
        check_op(&[r], &mut rng, |t, v| Ok(t.relu(v[0])));
    }
}

#[test]
fn convolution_primitives() {
    let mut rng = SplitMix64::new(2);
    for case in 0..50 {
        let (ci, co, h, w) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let k = [1, 3][case % 2];
        let x = rand_tensor(&mut rng, &[ci, h, w], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[co, ci, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[co], -1.0, 1.0);
        let e = rand_tensor(&mut rng, &[co, h, w], -1.0, 1.0);
        check_op(&[x.clone(), kern.clone(), b.clone()], &mut rng, |t, v| {
            t.conv2d_same(v[0], v[1], v[2], None)
        });
        check_op(&[x, kern, b, e], &mut rng, |t, v| t.conv2d_same(v[0], v[1], v[2], Some(v[3])));

        let frames = 3 + rng.below(2);
        let x3 = rand_tensor(&mut rng, &[frames, ci, h, w], -1.0, 1.0);
        let k3 = rand_tensor(&mut rng, &[co, ci, 3, k, k], -1.0, 1.0);
        let b3 = rand_tensor(&mut rng, &[co], -1.0, 1.0);
        check_op(&[x3, k3, b3], &mut rng, |t, v| t.conv3d(v[0], v[1], v[2]));
    }
}

#[test]
fn shape_and_reduction_primitives() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..50 {
        let a = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let one = rand_tensor(&mut rng, &[1, 4, 4], -2.0, 2.0);
        check_op(&[a.clone()], &mut rng, |t, v| t.avg_pool2(v[0]));
        check_op(&[a.clone(), b.clone()], &mut rng, |t, v| t.concat(&[v[0], v[1]]));
        check_op(&[a.clone()], &mut rng, |t, v| t.slice_channels(v[0], 1, 2));
        check_op(&[a.clone(), a.clone()], &mut rng, |t, v| {
            let s = t.stack(&[v[0], v[1]])?;
            t.mean_leading(s)
        });
        check_op(&[a.clone()], &mut rng, |t, v| t.spatial_average(v[0]));
        check_op(&[a.clone()], &mut rng, |t, v| t.channel_sum(v[0]));
        check_op(&[one], &mut rng, |t, v| t.softmax_locations(v[0]));
        check_op(&[a], &mut rng, |t, v| Ok(t.sum(v[0])));
    }
}

#[test]
fn linear_primitives() {
    let mut rng = SplitMix64::new(4);
    for _ in 0..50 {
        let m = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let v3 = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let v4 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        check_op(&[m.clone(), v3], &mut rng, |t, v| t.matvec(v[0], v[1], false));
        check_op(&[m.clone(), v4], &mut rng, |t, v| t.matvec(v[0], v[1], true));
        let x = rand_tensor(&mut rng, &[4, 2, 3], -1.0, 1.0);
        let col = rng.below(3);
        check_op(&[x, m], &mut rng, |t, v| t.scale_channels_by_column(v[0], v[1], col));
        let logits = rand_tensor(&mut rng, &[5], -3.0, 3.0);
        let label = rng.below(5);
        check_op(&[logits], &mut rng, |t, v| t.cross_entropy(v[0], label));
    }
}

fn assert_all_pass(variant: &str, report: &[gradcheck::TensorCheck]) {
    assert!(!report.is_empty());
    for c in report {
        assert!(c.passed, "{variant}: {} rel err {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn every_variant_full_parameter_check() {
    for v in Variant::ALL {
        let fx = GradcheckFixture::new(v, 1).unwrap();
        let report = fx.check(None).unwrap();
        assert_eq!(report.len(), fx.params.len());
        assert_all_pass(v.name(), &report);
    }
}

#[test]
fn both_couplers_carry_checked_gradients() {
    for gates in [FlowGates::All, FlowGates::MemoryOnly] {
        let mut cfg = gradcheck_model_config();
        cfg.flow_gates = gates;
        let fx = GradcheckFixture::with_config(Variant::TwoStreamCrossModal, &cfg, 2).unwrap();
        let report = fx.check(None).unwrap();
        assert_all_pass("two_stream_crossmodal", &report);
        for coupler in ["couplers.flow_to_lsta", "couplers.summary_to_clstm"] {
            let hit: Vec<_> = report.iter().filter(|c| c.name.starts_with(coupler)).collect();
            assert!(!hit.is_empty(), "{coupler} not checked");
        }
    }
}

#[test]
fn corrupted_adjoint_is_caught_and_named() {
    let fx = GradcheckFixture::new(Variant::Lsta, 3).unwrap();
    let fault = BackwardFault {
        op: OpKind::ScaleColumn,
        slot: 1,
        factor: 1.5,
    };
    let report = fx.check(Some(fault)).unwrap();
    let failed: Vec<_> = report.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|n| n.ends_with(".theta")), "{failed:?}");
    assert!(report.iter().any(|c| c.passed));
}

#[test]
fn lsta_sequence_gradients() {
    let mut rng = SplitMix64::new(5);
    let cfg = CellConfig::new(2, 3, 3, 3);
    let mut params = ParamSet::new();
    let cell = LstaCell::new("lsta", cfg, &mut params, &mut rng).unwrap();
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.get_mut(id).data_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
    let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0)).collect();
    let loss = |tape: &mut Tape, bind: &lsta_core::Binding| -> Result<Var> {
        let xv: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let init = LstaState::zeros(tape, &cfg)?;
        let (st, _) = cell.run_sequence(tape, bind, &xv, init, &GateBiases::default())?;
        let avg = tape.spatial_average(st.o)?;
        tape.cross_entropy(avg, 1)
    };
    let mut probe = Tape::new();
    let b = params.bind(&mut probe, |_| false);
    loss(&mut probe, &b).unwrap();
    assert!(probe.kink_margin() >= 1e-3, "fixture too close to an argmax tie");
    let report = gradcheck::check_params(&params, |_| true, Tape::new, loss, DEFAULT_STEP, GRADCHECK_TOLERANCE).unwrap();
    assert_all_pass("lsta sequence", &report);
}
