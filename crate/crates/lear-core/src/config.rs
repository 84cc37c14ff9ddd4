//! Model/training configuration and the line-oriented `key = value` config
//! file format. Unknown keys are rejected.

use std::path::Path;

use crate::decoding::DecodeStrategy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionOptions};
use crate::loss::{LossWeights, SpanMode};

/// Where the label branch reads its input text from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// The category's annotation text (the guideline sentence).
    Annotation,
    /// Just the category name.
    Name,
}

impl std::str::FromStr for LabelSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annotation" => Ok(LabelSource::Annotation),
            "name" => Ok(LabelSource::Name),
            other => Err(Error::Config(format!("unknown label source '{other}'"))),
        }
    }
}

/// How the label branch is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEncoderKind {
    /// The transformer encoder, weights shared with the text branch.
    Shared,
    /// A plain trainable embedding table; gradients never reach the
    /// transformer through the label branch.
    StaticEmbedding,
}

impl std::str::FromStr for LabelEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(LabelEncoderKind::Shared),
            "static-embedding" => Ok(LabelEncoderKind::StaticEmbedding),
            other => Err(Error::Config(format!("unknown label encoder '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub max_span_len: usize,
    pub fusion_mode: FusionMode,
    pub scaled_attention: bool,
    pub label_source: LabelSource,
    pub label_encoder: LabelEncoderKind,
    pub pair_per_category: bool,
}

impl ModelConfig {
    pub fn fusion_options(&self, keep_attention: bool) -> FusionOptions {
        FusionOptions {
            mode: self.fusion_mode,
            scaled_attention: self.scaled_attention,
            keep_attention,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            max_span_len: crate::scoring::DEFAULT_MAX_SPAN_LEN,
            fusion_mode: FusionMode::TokenAttention,
            scaled_attention: false,
            label_source: LabelSource::Annotation,
            label_encoder: LabelEncoderKind::Shared,
            pair_per_category: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_task: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub mode: SpanMode,
    pub decode: DecodeStrategy,
    pub dropout: f64,
    pub warmup_frac: f64,
    pub threshold: f64,
}

impl TrainConfig {
    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 1e-3,
            lr_task: 2e-3,
            epochs: 50,
            batch_size: 8,
            seed: 42,
            alpha: 1.0,
            beta: 1.0,
            mode: SpanMode::Flat,
            decode: DecodeStrategy::Heuristic,
            dropout: 0.0,
            warmup_frac: 0.0,
            threshold: crate::decoding::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "d_model" => self.model.encoder.d_model = num(key, value)?,
            "layers" => self.model.encoder.layers = num(key, value)?,
            "heads" => self.model.encoder.heads = num(key, value)?,
            "ffn_mult" => self.model.encoder.ffn_mult = num(key, value)?,
            "max_seq_len" => self.model.encoder.max_seq_len = num(key, value)?,
            "max_span_len" => self.model.max_span_len = num(key, value)?,
            "fusion_mode" => self.model.fusion_mode = value.parse()?,
            "scaled_attention" => self.model.scaled_attention = num(key, value)?,
            "label_source" => self.model.label_source = value.parse()?,
            "label_encoder" => self.model.label_encoder = value.parse()?,
            "pair_per_category" => self.model.pair_per_category = num(key, value)?,
            "lr_encoder" => self.train.lr_encoder = num(key, value)?,
            "lr_task" => self.train.lr_task = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "alpha" => self.train.alpha = num(key, value)?,
            "beta" => self.train.beta = num(key, value)?,
            "mode" => self.train.mode = value.parse()?,
            "decode" => self.train.decode = value.parse()?,
            "dropout" => self.train.dropout = num(key, value)?,
            "warmup_frac" => self.train.warmup_frac = num(key, value)?,
            "threshold" => self.train.threshold = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.model.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be positive".into()));
        }
        let t = &self.train;
        if t.lr_encoder <= 0.0 || t.lr_task <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                t.dropout
            )));
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        t.loss_weights()?;
        match (t.mode, t.decode) {
            (SpanMode::Flat, DecodeStrategy::Nested) => Err(Error::Config(
                "flat mode cannot use nested decoding".into(),
            )),
            (SpanMode::Nested, DecodeStrategy::Heuristic | DecodeStrategy::Nearest) => {
                Err(Error::Config(
                    "nested mode requires nested decoding".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}
