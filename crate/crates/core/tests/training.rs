use lsta_core::synth::{generate_dataset, Dataset, ToyTaskConfig};
use lsta_core::train::{evaluate, train, Model, Stage, TrainConfig, Trainer, Variant};

fn data(seed: u64) -> (Dataset, Dataset) {
    let cfg = ToyTaskConfig {
        train_per_class: 2,
        test_per_class: 2,
        seed,
        ..Default::default()
    };
    generate_dataset(&cfg).unwrap()
}

fn small(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(variant);
    c.seed = seed;
    c.model.depth = 4;
    c.model.hidden = 3;
    c.model.categories = 5;
    c.model.frames = 4;
    c.stage1.epochs = 2;
    c.stage1.decay_epochs.clear();
    c.stage2.epochs = 1;
    c.pretrain.epochs = 1;
    c
}

#[test]
fn same_seed_same_bits() {
    let (tr, _) = data(1);
    for v in [Variant::Lsta, Variant::TwoStreamCrossModal] {
        let a = train(&small(v, 3), &tr).unwrap();
        let b = train(&small(v, 3), &tr).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn frozen_tensors_do_not_move() {
    let (tr, _) = data(2);
    let cfg = small(Variant::Lsta, 4);
    let trainer = Trainer::new(&cfg, &tr).unwrap();
    let (mut state, _) = trainer.init_state().unwrap();
    let before = state.params.clone();
    trainer.run_epoch(&mut state).unwrap();
    for (id, name, t) in state.params.iter() {
        let moved = t != before.get(id);
        // the bias controller only shifts argmax scores, so its gradient is exactly zero
        let expect = trainer.model.trainable(name, Stage::One, true) && !name.ends_with("bias_ctrl.w_o");
        assert_eq!(moved, expect, "{name}");
    }
    trainer.run_epoch(&mut state).unwrap();
    let mid = state.params.clone();
    trainer.run_epoch(&mut state).unwrap();
    for (id, name, t) in state.params.iter() {
        if name.contains(".backbone.conv1.") {
            assert_eq!(t, mid.get(id), "{name}");
        }
        if name.contains(".backbone.conv2.") {
            assert_ne!(t, mid.get(id), "{name}");
        }
    }
}

#[test]
fn loss_drops_after_first_epoch() {
    let (tr, _) = data(3);
    let mut drops: Vec<f64> = (0..3)
        .map(|s| {
            let mut cfg = small(Variant::Lsta, s);
            cfg.stage1.epochs = 4;
            cfg.stage2.epochs = 0;
            let out = train(&cfg, &tr).unwrap();
            out.history[0].loss - out.history.last().unwrap().loss
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let cfg = ToyTaskConfig {
        train_per_class: 1,
        seed: 4,
        ..Default::default()
    };
    let (_, te) = generate_dataset(&cfg).unwrap();
    let n = te.len() as f64;
    let p = 1.0 / te.meta.classes() as f64;
    let bound = 3.0 * (p * (1.0 - p) / n).sqrt();
    for s in 0..3 {
        let c = small(Variant::Lsta, s);
        let (model, params) = Model::build(c.variant, &c.model, &te.meta, s).unwrap();
        let r = evaluate(&model, &params, &te).unwrap();
        assert_eq!(r.confusion.total(), te.len() as u64);
        assert!((r.activity_accuracy - p).abs() <= bound, "seed {s}: acc {} chance {p}", r.activity_accuracy);
    }
}

#[test]
fn action_pretraining_beats_chance() {
    let cfg = ToyTaskConfig {
        train_per_class: 6,
        seed: 5,
        ..Default::default()
    };
    let (tr, _) = generate_dataset(&cfg).unwrap();
    let mut c = small(Variant::TwoStreamLate, 5);
    c.pretrain.epochs = 6;
    c.pretrain.lr = 1e-2;
    let trainer = Trainer::new(&c, &tr).unwrap();
    let (_, report) = trainer.init_state().unwrap();
    let report = report.unwrap();
    assert!(report.pretrained);
    assert!(report.action_accuracy > 0.25, "{}", report.action_accuracy);
}

#[test]
fn zero_pretrain_epochs_is_reported() {
    let (tr, _) = data(6);
    let mut c = small(Variant::TwoStreamLate, 6);
    c.pretrain.epochs = 0;
    let trainer = Trainer::new(&c, &tr).unwrap();
    let (_, report) = trainer.init_state().unwrap();
    let report = report.unwrap();
    assert!(!report.pretrained);
    assert!(report.history.is_empty());
}

#[test]
fn decomposed_accuracies_bound_activity() {
    let (tr, te) = data(7);
    let out = train(&small(Variant::Pooling, 7), &tr).unwrap();
    let r = evaluate(&out.model, &out.state.params, &te).unwrap();
    assert!(r.activity_accuracy <= r.action_accuracy);
    assert!(r.activity_accuracy <= r.object_accuracy);
}

#[test]
fn backbone_untouched_without_stage_two() {
    let (tr, _) = data(8);
    let mut c = small(Variant::AttentionPooling, 8);
    c.stage2.epochs = 0;
    let trainer = Trainer::new(&c, &tr).unwrap();
    let (init, _) = trainer.init_state().unwrap();
    let out = train(&c, &tr).unwrap();
    for (id, name, t) in out.state.params.iter() {
        if name.contains(".backbone.") {
            assert_eq!(t, init.params.get(id), "{name}");
        }
    }
}
