//! The `lsta` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lsta_core::synth::{generate_dataset, Dataset};
use lsta_core::train::{GradcheckFixture, Variant};

use crate::attention::export_attention;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Preset, RunConfig};
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{CliError, Result};
use crate::report::{
    ablation_markdown, confusion_csv, confusion_diff_csv, describe, metrics_csv, top_improved_csv, Summary,
};
use crate::run::{evaluate_checkpoint, restore, train_and_evaluate};

pub const TRAIN_FILE: &str = "train.lsta";
pub const TEST_FILE: &str = "test.lsta";

#[derive(Debug, Parser)]
#[command(name = "lsta", version, about = "Train and inspect LSTA models on the synthetic activity task")]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration overlaid on the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Directory holding train.lsta and test.lsta.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test sets.
    GenData,
    /// Train one variant and evaluate it on the test set.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Train every variant with a shared seed and dataset and compare them.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        /// Subset of variants, in any order; defaults to all seven.
        #[arg(long, value_parser = parse_variant, num_args = 1.., value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Compare analytic and finite-difference gradients of every parameter.
    Gradcheck {
        #[arg(long, value_parser = parse_variant, default_value = "lsta")]
        variant: Variant,
        /// Check all seven variants.
        #[arg(long)]
        all: bool,
    },
    /// Write per-step attention maps of one test clip as PGM and CSV.
    ExportAttention {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Index into the test set.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Summarize run directories, recomputing accuracies from the confusion
    /// matrices.
    Report {
        /// Run directories (each with summary.json) or summary files.
        #[arg(long = "run", value_name = "PATH", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

impl Cli {
    fn run_config(&self, variant: Option<Variant>) -> Result<RunConfig> {
        let base = variant.unwrap_or(Variant::Lsta);
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, self.preset, base)?,
            None => RunConfig::preset(self.preset, base),
        };
        if let Some(v) = variant {
            cfg.train.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(CliError::io(&p))?;
    Ok(p)
}

fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("dataset directory {} does not exist", dir.display())));
    }
    let train = read_dataset(&dir.join(TRAIN_FILE))?;
    let test = read_dataset(&dir.join(TEST_FILE))?;
    Ok((train, test))
}

fn load_test(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("dataset directory {} does not exist", dir.display())));
    }
    read_dataset(&dir.join(TEST_FILE))
}

/// Runs the parsed command, writing progress to `log`.
pub fn execute(cli: &Cli, log: &mut dyn std::io::Write) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            let cfg = cli.run_config(None)?;
            let (train, test) = generate_dataset(&cfg.task)?;
            create_out(out)?;
            write_dataset(&out.join(TRAIN_FILE), &train)?;
            write_dataset(&out.join(TEST_FILE), &test)?;
            write(out, "task.json", serde_json::to_string_pretty(&cfg.task).unwrap() + "\n")?;
            let _ = writeln!(log, "wrote {} train and {} test clips to {}", train.len(), test.len(), out.display());
        }
        Command::Train { data, variant, resume } => {
            let cfg = cli.run_config(*variant)?;
            let (train, test) = load_split(&data.data)?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let run = train_and_evaluate(&cfg, &train, &test, resume, log)?;
            create_out(out)?;
            save_checkpoint(&out.join("checkpoint.bin"), &run.checkpoint)?;
            write(out, "config.json", cfg.to_json())?;
            write(out, "metrics.csv", metrics_csv(&run.history))?;
            write(out, "confusion.csv", confusion_csv(&run.report.confusion))?;
            write(out, "summary.json", run.summary.to_json())?;
            let _ = write!(log, "{}", describe(&run.summary));
        }
        Command::Eval {
            data,
            checkpoint,
            variant,
        } => {
            let cfg = cli.run_config(*variant)?;
            let test = load_test(&data.data)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let summary = evaluate_checkpoint(&cfg, &test, &ckpt)?;
            create_out(out)?;
            write(out, "eval_confusion.csv", confusion_csv(&summary.confusion()?))?;
            write(out, "eval_summary.json", summary.to_json())?;
            let _ = write!(log, "{}", describe(&summary));
        }
        Command::Ablate { data, variants } => {
            let order: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                Variant::ALL.iter().copied().filter(|v| variants.contains(v)).collect()
            };
            let base = cli.run_config(None)?;
            let (train, test) = load_split(&data.data)?;
            let mut runs = Vec::new();
            for &v in &order {
                let mut cfg = base.clone();
                cfg.train.variant = v;
                let _ = writeln!(log, "== {}", v.name());
                runs.push(train_and_evaluate(&cfg, &train, &test, None, log)?);
            }
            // nothing is written until every variant has trained
            create_out(out)?;
            let summaries: Vec<Summary> = runs.iter().map(|r| r.summary.clone()).collect();
            write(out, "ablation.md", ablation_markdown(&summaries))?;
            for (v, r) in order.iter().zip(&runs) {
                let dir = out.join(v.name());
                create_out(&dir)?;
                save_checkpoint(&dir.join("checkpoint.bin"), &r.checkpoint)?;
                let mut cfg = base.clone();
                cfg.train.variant = *v;
                write(&dir, "config.json", cfg.to_json())?;
                write(&dir, "metrics.csv", metrics_csv(&r.history))?;
                write(&dir, "confusion.csv", confusion_csv(&r.report.confusion))?;
                write(&dir, "summary.json", r.summary.to_json())?;
            }
            for (i, w) in runs.windows(2).enumerate() {
                let (a, b) = (order[i].name(), order[i + 1].name());
                let (ca, cb) = (&w[0].report.confusion, &w[1].report.confusion);
                write(out, &format!("diff_{b}_vs_{a}.csv"), confusion_diff_csv(ca, cb)?)?;
                write(out, &format!("top_improved_{b}_vs_{a}.csv"), top_improved_csv(ca, cb, 25)?)?;
            }
            let _ = write!(log, "{}", ablation_markdown(&summaries));
        }
        Command::Gradcheck { variant, all } => {
            let variants = if *all { Variant::ALL.to_vec() } else { vec![*variant] };
            let seed = cli.seed.unwrap_or(0);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["variant", "tensor", "len", "max_rel_error", "passed"]).unwrap();
            let mut failed = Vec::new();
            for v in variants {
                let report = GradcheckFixture::new(v, seed)?.check(None)?;
                for c in &report {
                    let _ = writeln!(
                        log,
                        "{:<24} {:<44} {:>6} {:>10.3e} {}",
                        v.name(),
                        c.name,
                        c.len,
                        c.max_rel_error,
                        if c.passed { "pass" } else { "FAIL" }
                    );
                    w.write_record([
                        v.name().to_string(),
                        c.name.clone(),
                        c.len.to_string(),
                        format!("{:e}", c.max_rel_error),
                        c.passed.to_string(),
                    ])
                    .unwrap();
                    if !c.passed {
                        failed.push(format!("{}:{}", v.name(), c.name));
                    }
                }
            }
            create_out(out)?;
            write(out, "gradcheck.csv", w.into_inner().unwrap())?;
            if !failed.is_empty() {
                return Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))));
            }
            let _ = writeln!(log, "all gradients within tolerance");
        }
        Command::ExportAttention {
            data,
            checkpoint,
            variant,
            sample,
        } => {
            let cfg = cli.run_config(*variant)?;
            let test = load_test(&data.data)?;
            let s = test.samples.get(*sample).ok_or_else(|| {
                CliError::Validation(format!("sample {sample} out of range for {} test clips", test.len()))
            })?;
            let ckpt = load_checkpoint(checkpoint)?;
            let (model, params) = restore(&cfg, &test, &ckpt)?;
            create_out(out)?;
            let files = export_attention(&model, &params, s, out)?;
            let _ = writeln!(log, "wrote {} files to {}", files.len(), out.display());
        }
        Command::Report { runs } => {
            let mut summaries = Vec::new();
            for p in runs {
                let file = if p.is_dir() { p.join("summary.json") } else { p.clone() };
                let text = std::fs::read_to_string(&file).map_err(CliError::io(&file))?;
                let s = Summary::from_json(&text)?;
                s.verify_accounting()?;
                summaries.push(s);
            }
            let mut md = String::new();
            for s in &summaries {
                md.push_str(&describe(s));
                md.push('\n');
            }
            if summaries.len() > 1 {
                summaries.sort_by_key(|s| Variant::ALL.iter().position(|v| *v == s.variant));
                md.push_str(&ablation_markdown(&summaries));
            }
            create_out(out)?;
            write(out, "report.md", &md)?;
            let _ = write!(log, "{md}");
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 usage or validation error,
/// 2 runtime failure.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    let mut err = std::io::stderr();
    match execute(&cli, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
