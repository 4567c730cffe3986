//! Run configuration: every model, training, data and path knob, with presets and a
//! `key = value` text form used for config files and checkpoint echoes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, BlockKind, ProjectionKind};
use crate::synth::GenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub d_word: usize,
    pub d_v: usize,
    pub heads: usize,
    pub scales: usize,
    pub early_blocks: usize,
    pub late_blocks: usize,
    pub ffn_mult: usize,
    pub motion_block: BlockKind,
    pub per_head_scaling: bool,
    pub bidirectional: bool,
    // objective and optimization
    pub lambda1: f64,
    pub lambda2: f64,
    pub aux_relevance_loss: bool,
    pub lr: f64,
    pub steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub max_span: usize,
    pub checkpoint_every: usize,
    // synthetic data
    pub t_min: usize,
    pub t_max: usize,
    pub span_min: usize,
    pub span_max: usize,
    pub entity_slack: usize,
    pub noise: f64,
    pub entity_words: usize,
    pub motion_words: usize,
    pub max_query_entities: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    // paths; empty means "use the built-in default"
    pub lexicon: PathBuf,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub test_data: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            d: 60,
            d_word: 60,
            d_v: 32,
            heads: 4,
            scales: 3,
            early_blocks: 1,
            late_blocks: 3,
            ffn_mult: 2,
            motion_block: BlockKind::LSTM_TRANSFORMER,
            per_head_scaling: false,
            bidirectional: false,
            lambda1: 1.0,
            lambda2: 10.0,
            aux_relevance_loss: false,
            lr: 5e-4,
            steps: 2000,
            grad_clip: 5.0,
            seed: 7,
            max_span: 0,
            checkpoint_every: 0,
            t_min: 16,
            t_max: 40,
            span_min: 3,
            span_max: 12,
            entity_slack: 6,
            noise: 0.1,
            entity_words: 8,
            motion_words: 8,
            max_query_entities: 2,
            train_samples: 1000,
            val_samples: 100,
            test_samples: 200,
            lexicon: PathBuf::new(),
            train_data: PathBuf::new(),
            val_data: PathBuf::new(),
            test_data: PathBuf::new(),
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                d: 504,
                d_word: 300,
                heads: 8,
                ..desk
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail(format!("d = {} must be positive and even", self.d));
        }
        if self.d_word == 0 || !self.d_word.is_multiple_of(2) {
            return fail(format!("d_word = {} must be positive and even", self.d_word));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads = {} must divide d = {}", self.heads, self.d));
        }
        let uses_lstm = matches!(
            self.motion_block,
            BlockKind::Transformer(ProjectionKind::MultiScaleLstm) | BlockKind::LstmOnly
        );
        if uses_lstm && (self.scales == 0 || !self.d.is_multiple_of(self.scales)) {
            return fail(format!("scales = {} must divide d = {}", self.scales, self.d));
        }
        if uses_lstm && self.bidirectional && !(self.d / self.scales).is_multiple_of(2) {
            return fail("bidirectional lstm needs an even per-scale width".into());
        }
        let uses_conv = matches!(
            self.motion_block,
            BlockKind::Transformer(ProjectionKind::TemporalConv) | BlockKind::ConvOnly
        );
        if uses_conv && !self.d.is_multiple_of(3) {
            return fail(format!("temporal conv blocks need 3 | d, got d = {}", self.d));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return fail("lr and grad_clip must be nonnegative".into());
        }
        self.gen_config().validate()
    }

    pub fn block_config(&self, kind: BlockKind) -> BlockConfig {
        BlockConfig {
            d: self.d,
            heads: self.heads,
            scales: self.scales,
            ffn_hidden: self.ffn_mult * self.d,
            per_head_scaling: self.per_head_scaling,
            bidirectional: self.bidirectional,
            ln_eps: 1e-5,
            kind,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            t_min: self.t_min,
            t_max: self.t_max,
            d_v: self.d_v,
            entity_words: self.entity_words,
            motion_words: self.motion_words,
            max_query_entities: self.max_query_entities,
            span_min: self.span_min,
            span_max: self.span_max,
            entity_slack: self.entity_slack,
            noise: self.noise,
            train: self.train_samples,
            val: self.val_samples,
            test: self.test_samples,
        }
    }

    pub fn max_span(&self) -> Option<usize> {
        (self.max_span > 0).then_some(self.max_span)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
            }
        }
        match key {
            "d" => self.d = num(key, value)?,
            "d_word" => self.d_word = num(key, value)?,
            "d_v" => self.d_v = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "scales" => self.scales = num(key, value)?,
            "early_blocks" => self.early_blocks = num(key, value)?,
            "late_blocks" => self.late_blocks = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "motion_block" => self.motion_block = value.parse()?,
            "per_head_scaling" => self.per_head_scaling = flag(key, value)?,
            "bidirectional" => self.bidirectional = flag(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "aux_relevance_loss" => self.aux_relevance_loss = flag(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "max_span" => self.max_span = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "t_min" => self.t_min = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "span_min" => self.span_min = num(key, value)?,
            "span_max" => self.span_max = num(key, value)?,
            "entity_slack" => self.entity_slack = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "entity_words" => self.entity_words = num(key, value)?,
            "motion_words" => self.motion_words = num(key, value)?,
            "max_query_entities" => self.max_query_entities = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "val_samples" => self.val_samples = num(key, value)?,
            "test_samples" => self.test_samples = num(key, value)?,
            "lexicon" => self.lexicon = PathBuf::from(value),
            "train_data" => self.train_data = PathBuf::from(value),
            "val_data" => self.val_data = PathBuf::from(value),
            "test_data" => self.test_data = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Every field as `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("d", self.d.to_string());
        put("d_word", self.d_word.to_string());
        put("d_v", self.d_v.to_string());
        put("heads", self.heads.to_string());
        put("scales", self.scales.to_string());
        put("early_blocks", self.early_blocks.to_string());
        put("late_blocks", self.late_blocks.to_string());
        put("ffn_mult", self.ffn_mult.to_string());
        put("motion_block", self.motion_block.to_string());
        put("per_head_scaling", self.per_head_scaling.to_string());
        put("bidirectional", self.bidirectional.to_string());
        put("lambda1", self.lambda1.to_string());
        put("lambda2", self.lambda2.to_string());
        put("aux_relevance_loss", self.aux_relevance_loss.to_string());
        put("lr", self.lr.to_string());
        put("steps", self.steps.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("seed", self.seed.to_string());
        put("max_span", self.max_span.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("t_min", self.t_min.to_string());
        put("t_max", self.t_max.to_string());
        put("span_min", self.span_min.to_string());
        put("span_max", self.span_max.to_string());
        put("entity_slack", self.entity_slack.to_string());
        put("noise", self.noise.to_string());
        put("entity_words", self.entity_words.to_string());
        put("motion_words", self.motion_words.to_string());
        put("max_query_entities", self.max_query_entities.to_string());
        put("train_samples", self.train_samples.to_string());
        put("val_samples", self.val_samples.to_string());
        put("test_samples", self.test_samples.to_string());
        put("lexicon", self.lexicon.display().to_string());
        put("train_data", self.train_data.display().to_string());
        put("val_data", self.val_data.display().to_string());
        put("test_data", self.test_data.display().to_string());
        s
    }
}
