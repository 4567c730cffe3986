//! Data preparation, single runs, the ablation table and hyperparameter sweeps.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::read_dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, DEFAULT_THRESHOLDS};
use crate::model::{load_lexicon, Model};
use crate::nn::{BlockKind, ProjectionKind};
use crate::synth::{generate_split, GroundedSample, Split, SyntheticSplits};
use crate::train::{train, TrainOptions, TrainingReport};

/// Reads each split from its configured path, or generates it when the path is empty.
pub fn prepare_data(cfg: &RunConfig) -> Result<SyntheticSplits> {
    let lexicon = load_lexicon(cfg)?;
    let gen = cfg.gen_config();
    let load = |path: &Path, split: Split, count: usize| -> Result<Vec<GroundedSample>> {
        if path.as_os_str().is_empty() {
            generate_split(&gen, &lexicon, split, count)
        } else {
            read_dataset(path)
        }
    };
    Ok(SyntheticSplits {
        train: load(&cfg.train_data, Split::Train, cfg.train_samples)?,
        val: load(&cfg.val_data, Split::Val, cfg.val_samples)?,
        test: load(&cfg.test_data, Split::Test, cfg.test_samples)?,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub training: TrainingReport,
    pub test: MetricReport,
}

/// Fresh model from `cfg`, trained on `data.train` (validated on `data.val`), scored on
/// `data.test`.
pub fn run_variant(cfg: &RunConfig, data: &SyntheticSplits, opts: &TrainOptions) -> Result<RunOutcome> {
    let mut model = Model::new(cfg)?;
    let training = train(&mut model, &data.train, &data.val, opts)?;
    let test = evaluate(&model, &data.test, &DEFAULT_THRESHOLDS)?.report;
    Ok(RunOutcome { model, training, test })
}

/// Motion-branch block kinds compared in the ablation, with their row labels.
pub const ABLATION_VARIANTS: [(&str, BlockKind); 5] = [
    ("FC Trans", BlockKind::Transformer(ProjectionKind::Linear)),
    ("T-Conv Trans", BlockKind::Transformer(ProjectionKind::TemporalConv)),
    ("T-Conv", BlockKind::ConvOnly),
    ("LSTM", BlockKind::LstmOnly),
    ("Ours", BlockKind::LSTM_TRANSFORMER),
];

/// Rows of labelled metric reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub title: String,
    pub key: String,
    pub rows: Vec<(String, MetricReport)>,
}

impl ResultTable {
    pub fn new(title: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            key: key.into(),
            rows: Vec::new(),
        }
    }

    pub fn get(&self, label: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    fn columns(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|(_, r)| r.column_names())
            .unwrap_or_else(|| {
                let mut c: Vec<String> = DEFAULT_THRESHOLDS.iter().map(|t| format!("R@1,IoU={t}")).collect();
                c.push("mIoU".into());
                c
            })
    }

    /// Percentages with two decimals, columns padded to a common width.
    pub fn to_aligned(&self) -> String {
        let cols = self.columns();
        let label_w = self.rows.iter().map(|(l, _)| l.len()).chain([self.key.len()]).max().unwrap_or(0);
        let col_w = cols.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{}\n", self.title);
        let _ = write!(out, "{:<label_w$}", self.key);
        for c in &cols {
            let _ = write!(out, "  {c:>col_w$}");
        }
        out.push('\n');
        for (label, report) in &self.rows {
            let _ = write!(out, "{label:<label_w$}");
            for v in report.values() {
                let _ = write!(out, "  {:>col_w$.2}", 100.0 * v);
            }
            out.push('\n');
        }
        out
    }

    /// Tab-separated, unscaled fractions, one header line.
    pub fn to_tsv(&self) -> String {
        let mut out = self.key.clone();
        for c in self.columns() {
            out.push('\t');
            out.push_str(&c);
        }
        out.push('\n');
        for (label, report) in &self.rows {
            out.push_str(label);
            for v in report.values() {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per motion-branch variant on the same data.
pub fn ablate(cfg: &RunConfig, data: &SyntheticSplits, opts: &TrainOptions) -> Result<ResultTable> {
    let mut table = ResultTable::new("motion-branch block ablation (test split)", "variant");
    for (label, kind) in ABLATION_VARIANTS {
        let mut c = cfg.clone();
        c.motion_block = kind;
        let outcome = run_variant(&c, data, opts)?;
        table.rows.push((label.to_string(), outcome.test));
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Scales,
    Lambda1,
    Lambda2,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scales" => Ok(SweepParam::Scales),
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            _ => Err(Error::Config(format!("unknown sweep `{s}` (expected scales, lambda1 or lambda2)"))),
        }
    }
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Scales => "scales",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
        }
    }

    /// Default grid: S = 1..6, λ = 1..10.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Scales => (1..=6).map(f64::from).collect(),
            _ => (1..=10).map(f64::from).collect(),
        }
    }
}

pub fn sweep(cfg: &RunConfig, data: &SyntheticSplits, param: SweepParam, values: &[f64], opts: &TrainOptions) -> Result<ResultTable> {
    let mut table = ResultTable::new(format!("{} sweep (test split)", param.key()), param.key());
    for &v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::Scales => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("scale count must be a positive integer, got {v}")));
                }
                c.scales = v as usize;
            }
            SweepParam::Lambda1 => c.lambda1 = v,
            SweepParam::Lambda2 => c.lambda2 = v,
        }
        let outcome = run_variant(&c, data, opts)?;
        table.rows.push((v.to_string(), outcome.test));
    }
    Ok(table)
}
