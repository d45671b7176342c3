//! Training and evaluation pipelines shared by the subcommands.

use lsta_core::synth::Dataset;
use lsta_core::train::{evaluate, EpochMetrics, MetricsReport, Model, PretrainReport, TrainState, Trainer};
use lsta_core::ParamSet;

use crate::checkpoint::{check_compatible, Checkpoint};
use crate::config::{config_hash, RunConfig};
use crate::error::{CliError, Result};
use crate::report::Summary;

pub struct RunOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub pretrain: Option<PretrainReport>,
    pub report: MetricsReport,
    pub summary: Summary,
}

fn check_geometry(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.meta != test.meta {
        return Err(CliError::Validation(format!(
            "train and test sets differ in geometry: {:?} vs {:?}",
            train.meta, test.meta
        )));
    }
    Ok(())
}

/// Trains `cfg.train` on `train` (continuing from `resume` if given) and
/// evaluates on `test`. `log` receives one line per epoch.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    resume: Option<Checkpoint>,
    log: &mut dyn std::io::Write,
) -> Result<RunOutcome> {
    check_geometry(train, test)?;
    let tc = &cfg.train;
    let hash = config_hash(tc);
    let trainer = Trainer::new(tc, train)?;
    let (mut state, pretrain): (TrainState, Option<PretrainReport>) = match resume {
        Some(ckpt) => {
            let (_, template) = Model::build(tc.variant, &tc.model, &train.meta, tc.seed)?;
            check_compatible(&ckpt, hash, &template)?;
            (ckpt.state, None)
        }
        None => trainer.init_state()?,
    };
    if let Some(p) = &pretrain {
        let _ = writeln!(log, "pretrain: {} epochs, action accuracy {:.4}", p.epochs, p.action_accuracy);
    }
    let mut history = Vec::new();
    while state.epoch < tc.total_epochs() {
        let m = trainer.run_epoch(&mut state).map_err(|e| match e {
            lsta_core::Error::NonFinite(msg) => CliError::Runtime(format!("training diverged: {msg}")),
            e => e.into(),
        })?;
        let _ = writeln!(
            log,
            "epoch {} stage {} lr {} loss {:.5} train accuracy {:.4}",
            m.epoch, m.stage, m.lr, m.loss, m.accuracy
        );
        history.push(m);
    }
    let report = evaluate(&trainer.model, &state.params, test)?;
    let summary = Summary::new(
        tc.variant,
        tc.seed,
        hash,
        &history,
        pretrain.as_ref(),
        &report,
        test.meta.actions,
        test.meta.objects,
    );
    Ok(RunOutcome {
        model: trainer.model,
        checkpoint: Checkpoint {
            config_hash: hash,
            state,
        },
        history,
        pretrain,
        report,
        summary,
    })
}

/// Rebuilds the model for `cfg` and checks `ckpt` against it.
pub fn restore(cfg: &RunConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<(Model, ParamSet)> {
    let tc = &cfg.train;
    let (model, template) = Model::build(tc.variant, &tc.model, &data.meta, tc.seed)?;
    check_compatible(ckpt, config_hash(tc), &template)?;
    Ok((model, ckpt.state.params.clone()))
}

pub fn evaluate_checkpoint(cfg: &RunConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<Summary> {
    let (model, params) = restore(cfg, data, ckpt)?;
    let report = evaluate(&model, &params, data)?;
    Ok(Summary::new(
        cfg.train.variant,
        cfg.train.seed,
        ckpt.config_hash,
        &[],
        None,
        &report,
        data.meta.actions,
        data.meta.objects,
    ))
}
