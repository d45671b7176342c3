//! Metric files: per-epoch CSV, JSON summaries, confusion matrices and the
//! ablation table.

use std::fmt::Write as _;

use lsta_core::train::{top_improved, Confusion, EpochMetrics, MetricsReport, PretrainReport, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Published GTEA 61 fixed-split accuracies (%) per variant, kept as
/// reference metadata only.
pub fn reference_accuracy(v: Variant) -> f64 {
    match v {
        Variant::Baseline => 51.72,
        Variant::OutputPooling => 62.07,
        Variant::AttentionPooling => 66.38,
        Variant::Pooling => 68.1,
        Variant::Lsta => 74.14,
        Variant::TwoStreamLate => 78.45,
        Variant::TwoStreamCrossModal => 79.31,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

impl From<&EpochMetrics> for EpochRow {
    fn from(m: &EpochMetrics) -> Self {
        EpochRow {
            epoch: m.epoch,
            stage: m.stage,
            lr: m.lr,
            loss: m.loss,
            train_accuracy: m.accuracy,
        }
    }
}

/// Everything `train` and `eval` report about one model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub actions: usize,
    pub objects: usize,
    pub test_clips: usize,
    pub epochs: Vec<EpochRow>,
    pub pretrain_epochs: Option<usize>,
    pub pretrained: Option<bool>,
    pub pretrain_action_accuracy: Option<f64>,
    pub test_loss: f64,
    pub activity_accuracy: f64,
    pub action_accuracy: f64,
    pub object_accuracy: f64,
    /// Rows are true activities, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl Summary {
    pub fn new(
        variant: Variant,
        seed: u64,
        config_hash: u64,
        history: &[EpochMetrics],
        pretrain: Option<&PretrainReport>,
        report: &MetricsReport,
        actions: usize,
        objects: usize,
    ) -> Self {
        let c = &report.confusion;
        Summary {
            variant,
            seed,
            config_hash: format!("{config_hash:016x}"),
            actions,
            objects,
            test_clips: c.total() as usize,
            epochs: history.iter().map(EpochRow::from).collect(),
            pretrain_epochs: pretrain.map(|p| p.epochs),
            pretrained: pretrain.map(|p| p.pretrained),
            pretrain_action_accuracy: pretrain.map(|p| p.action_accuracy),
            test_loss: report.loss,
            activity_accuracy: report.activity_accuracy,
            action_accuracy: report.action_accuracy,
            object_accuracy: report.object_accuracy,
            confusion: c.counts.chunks(c.classes).map(|r| r.to_vec()).collect(),
        }
    }

    pub fn confusion(&self) -> Result<Confusion> {
        let classes = self.confusion.len();
        if self.confusion.iter().any(|r| r.len() != classes) || classes != self.actions * self.objects {
            return Err(CliError::Validation(format!(
                "confusion matrix is not {0}x{0}",
                self.actions * self.objects
            )));
        }
        Ok(Confusion {
            classes,
            counts: self.confusion.concat(),
        })
    }

    /// Recomputes the three accuracies from the confusion matrix and checks
    /// that they equal the stored figures exactly.
    pub fn verify_accounting(&self) -> Result<(f64, f64, f64)> {
        let c = self.confusion()?;
        let got = c.accuracies(self.actions, self.objects)?;
        let stored = (self.activity_accuracy, self.action_accuracy, self.object_accuracy);
        if got != stored || c.total() as usize != self.test_clips {
            return Err(CliError::Validation(format!(
                "stored accuracies {stored:?} disagree with the confusion matrix {got:?}"
            )));
        }
        if !(got.0 <= got.1 && got.0 <= got.2) {
            return Err(CliError::Validation("activity accuracy exceeds a component accuracy".into()));
        }
        Ok(got)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("summary: {e}")))
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in history {
        w.serialize(EpochRow::from(m)).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).unwrap()
}

fn matrix_csv<T: ToString>(classes: usize, cells: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..classes).map(|c| c.to_string()));
    w.write_record(&header).unwrap();
    for (t, row) in cells.chunks(classes).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn confusion_csv(c: &Confusion) -> String {
    matrix_csv(c.classes, &c.counts)
}

/// `b - a` as a CSV matrix.
pub fn confusion_diff_csv(a: &Confusion, b: &Confusion) -> Result<String> {
    Ok(matrix_csv(a.classes, &b.diff(a)?))
}

pub fn top_improved_csv(a: &Confusion, b: &Confusion, n: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "gain"]).unwrap();
    for (c, g) in top_improved(a, b, n)? {
        w.write_record([c.to_string(), g.to_string()]).unwrap();
    }
    Ok(String::from_utf8(w.into_inner().unwrap()).unwrap())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Markdown table in ladder order, one row per trained variant.
pub fn ablation_markdown(rows: &[Summary]) -> String {
    let mut s = String::new();
    s.push_str("# Ablation on the synthetic activity task\n\n");
    s.push_str(
        "Reference column: published GTEA 61 fixed-split activity accuracies. \
         They come from real video and an ImageNet backbone and are NOT reproduced here; \
         they are listed for row correspondence only.\n\n",
    );
    s.push_str("| variant | activity % | action % | object % | reference % (not reproduced) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.variant.name(),
            pct(r.activity_accuracy),
            pct(r.action_accuracy),
            pct(r.object_accuracy),
            reference_accuracy(r.variant)
        )
        .unwrap();
    }
    s
}

/// Human-readable digest of one summary.
pub fn describe(s: &Summary) -> String {
    let mut out = String::new();
    writeln!(out, "variant {} seed {} config {}", s.variant.name(), s.seed, s.config_hash).unwrap();
    if let Some(last) = s.epochs.last() {
        writeln!(
            out,
            "trained {} epochs, final train loss {:.4}, train accuracy {}%",
            s.epochs.len(),
            last.loss,
            pct(last.train_accuracy)
        )
        .unwrap();
    }
    if let (Some(e), Some(acc)) = (s.pretrain_epochs, s.pretrain_action_accuracy) {
        writeln!(out, "action pretraining: {e} epochs, action accuracy {}%", pct(acc)).unwrap();
    }
    writeln!(
        out,
        "test clips {}: activity {}%, action {}%, object {}%, loss {:.4}",
        s.test_clips,
        pct(s.activity_accuracy),
        pct(s.action_accuracy),
        pct(s.object_accuracy),
        s.test_loss
    )
    .unwrap();
    out
}
