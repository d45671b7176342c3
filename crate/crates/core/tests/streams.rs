use lsta_core::streams::{flow_analog, FusionMode, FLOW_DEPTH};
use lsta_core::synth::{generate_dataset, ToyTaskConfig};
use lsta_core::train::{Model, ModelConfig, Network, Variant};
use lsta_core::{Tape, Tensor};

fn energy(flow: &Tensor, parity: usize) -> f64 {
    let hw = flow.dims()[1] * flow.dims()[2];
    flow.data()
        .chunks_exact(hw)
        .enumerate()
        .filter(|(i, _)| i % 2 == parity)
        .flat_map(|(_, p)| p.iter())
        .map(|v| v * v)
        .sum()
}

fn translating_frames(vy: f64, vx: f64) -> Vec<Tensor> {
    let pattern = |y: f64, x: f64| (0.6 * x + 0.2 * y).sin() + (0.5 * y - 0.3 * x).cos() + (0.4 * (x + y)).sin();
    (0..10)
        .map(|t| {
            let data = (0..16 * 16)
                .map(|i| pattern((i / 16) as f64 - vy * t as f64, (i % 16) as f64 - vx * t as f64))
                .collect();
            Tensor::new(&[1, 16, 16], data).unwrap()
        })
        .collect()
}

#[test]
fn horizontal_motion_loads_x_channels() {
    let flow = flow_analog(&translating_frames(0.0, 0.5), 5, FLOW_DEPTH).unwrap();
    assert!(energy(&flow, 0) > 1.2 * energy(&flow, 1));
    let flow = flow_analog(&translating_frames(0.5, 0.0), 5, FLOW_DEPTH).unwrap();
    assert!(energy(&flow, 1) > 1.2 * energy(&flow, 0));
}

fn small() -> (ModelConfig, lsta_core::synth::Dataset) {
    let cfg = ToyTaskConfig {
        height: 12,
        width: 12,
        distractors: 1,
        train_per_class: 1,
        test_per_class: 1,
        seed: 9,
        ..Default::default()
    };
    let (train, _) = generate_dataset(&cfg).unwrap();
    let model = ModelConfig {
        depth: 4,
        hidden: 3,
        categories: 5,
        frames: 4,
        ..Default::default()
    };
    (model, train)
}

#[test]
fn fresh_crossmodal_model_equals_late_fusion() {
    let (mc, data) = small();
    let (model, params) = Model::build(Variant::TwoStreamCrossModal, &mc, &data.meta, 5).unwrap();
    let mut late = model.clone();
    if let Network::Two(ts) = &mut late.net {
        ts.mode = FusionMode::LateAverage;
        ts.couplers = None;
    } else {
        panic!("two-stream variant built a single stream");
    }
    for sample in data.samples.iter().take(4) {
        let inputs = model.inputs(sample).unwrap();
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, |_| false);
        let a = model.forward(&mut tape, &bind, &inputs).unwrap().logits;
        let b = late.forward(&mut tape, &bind, &inputs).unwrap().logits;
        assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
    }
}

#[test]
fn appearance_stream_depends_on_frame_order() {
    let (mc, data) = small();
    let (model, params) = Model::build(Variant::Lsta, &mc, &data.meta, 6).unwrap();
    let sample = &data.samples[3];
    let inputs = model.inputs(sample).unwrap();
    let mut reversed = inputs.clone();
    reversed.frames.reverse();
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, |_| false);
    let a = model.forward(&mut tape, &bind, &inputs).unwrap().logits;
    let b = model.forward(&mut tape, &bind, &reversed).unwrap().logits;
    assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-9);
}
