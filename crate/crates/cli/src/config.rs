//! Flat key=value run configuration.
//!
//! Every run writes its fully-resolved configuration next to its outputs so
//! a run can be reproduced from the artifact directory alone. Unknown keys
//! are rejected rather than ignored.

use std::fmt::Write as _;
use std::path::Path;

use ziqe::data::{CorruptionConfig, SynthConfig};
use ziqe::errors::{Result, ZiqeError};
use ziqe::qe_head::HeadKind;
use ziqe::speech_bert::{MaskingConfig, ModelConfig, SpecialTokens};

/// How the Beta precision φ is obtained for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiMode {
    /// Estimate by maximum likelihood from the nonzero training labels.
    Mle,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // model
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub memory_layers: usize,
    pub feedforward_dim: usize,
    pub max_seq_len: usize,
    pub lambda_st: f64,
    // data
    pub count: usize,
    pub raw_dim: usize,
    pub frames_per_token: usize,
    pub stack_window: usize,
    pub stack_stride: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_scale: f64,
    pub p_clean: f64,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    // masking
    pub mask_p_target: f64,
    pub mask_p_mask: f64,
    pub mask_p_substitute: f64,
    // training
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_frac: f64,
    pub patience: usize,
    pub freeze_backbone: bool,
    pub use_expected: bool,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub phi: PhiMode,
    pub length_buckets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 50,
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            memory_layers: 2,
            feedforward_dim: 64,
            max_seq_len: 256,
            lambda_st: 0.15,
            count: 1000,
            raw_dim: 8,
            frames_per_token: 4,
            stack_window: 4,
            stack_stride: 4,
            min_len: 5,
            max_len: 12,
            noise_scale: 0.1,
            p_clean: 0.4,
            p_sub: 0.2,
            p_del: 0.1,
            p_ins: 0.1,
            mask_p_target: 0.15,
            mask_p_mask: 0.8,
            mask_p_substitute: 0.1,
            seed: 0,
            lr: 1e-3,
            epochs: 5,
            batch_size: 16,
            holdout_frac: 0.1,
            patience: 3,
            freeze_backbone: false,
            use_expected: true,
            head: HeadKind::ZiBeta,
            head_hidden: 16,
            phi: PhiMode::Mle,
            length_buckets: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ZiqeError::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ZiqeError::Config(format!(
            "bad value {value:?} for key {key} (expected true/false)"
        ))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "memory_layers" => self.memory_layers = parse(key, value)?,
            "feedforward_dim" => self.feedforward_dim = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "lambda_st" => self.lambda_st = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "raw_dim" => self.raw_dim = parse(key, value)?,
            "frames_per_token" => self.frames_per_token = parse(key, value)?,
            "stack_window" => self.stack_window = parse(key, value)?,
            "stack_stride" => self.stack_stride = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "noise_scale" => self.noise_scale = parse(key, value)?,
            "p_clean" => self.p_clean = parse(key, value)?,
            "p_sub" => self.p_sub = parse(key, value)?,
            "p_del" => self.p_del = parse(key, value)?,
            "p_ins" => self.p_ins = parse(key, value)?,
            "mask_p_target" => self.mask_p_target = parse(key, value)?,
            "mask_p_mask" => self.mask_p_mask = parse(key, value)?,
            "mask_p_substitute" => self.mask_p_substitute = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "holdout_frac" => self.holdout_frac = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "freeze_backbone" => self.freeze_backbone = parse_bool(key, value)?,
            "use_expected" => self.use_expected = parse_bool(key, value)?,
            "head" => self.head = HeadKind::parse(value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "phi" => {
                self.phi = if value == "mle" {
                    PhiMode::Mle
                } else {
                    PhiMode::Fixed(parse(key, value)?)
                }
            }
            "length_buckets" => self.length_buckets = parse(key, value)?,
            _ => return Err(ZiqeError::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ZiqeError::Config(format!("line {}: expected key=value, got {raw:?}", idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// The fully-resolved configuration, one key per line, sorted.
    pub fn to_text(&self) -> String {
        let phi = match self.phi {
            PhiMode::Mle => "mle".to_string(),
            PhiMode::Fixed(v) => format!("{v}"),
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("memory_layers", self.memory_layers.to_string()),
            ("feedforward_dim", self.feedforward_dim.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("lambda_st", self.lambda_st.to_string()),
            ("count", self.count.to_string()),
            ("raw_dim", self.raw_dim.to_string()),
            ("frames_per_token", self.frames_per_token.to_string()),
            ("stack_window", self.stack_window.to_string()),
            ("stack_stride", self.stack_stride.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("p_clean", self.p_clean.to_string()),
            ("p_sub", self.p_sub.to_string()),
            ("p_del", self.p_del.to_string()),
            ("p_ins", self.p_ins.to_string()),
            ("mask_p_target", self.mask_p_target.to_string()),
            ("mask_p_mask", self.mask_p_mask.to_string()),
            ("mask_p_substitute", self.mask_p_substitute.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("holdout_frac", self.holdout_frac.to_string()),
            ("patience", self.patience.to_string()),
            ("freeze_backbone", self.freeze_backbone.to_string()),
            ("use_expected", self.use_expected.to_string()),
            ("head", self.head.name()),
            ("head_hidden", self.head_hidden.to_string()),
            ("phi", phi),
            ("length_buckets", self.length_buckets.to_string()),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.vocab_size,
            raw_dim: self.raw_dim,
            frames_per_token: self.frames_per_token,
            noise_scale: self.noise_scale,
            min_len: self.min_len,
            max_len: self.max_len,
            ..SynthConfig::default()
        }
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            p_clean: self.p_clean,
            p_sub: self.p_sub,
            p_del: self.p_del,
            p_ins: self.p_ins,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            memory_layers: self.memory_layers,
            feedforward_dim: self.feedforward_dim,
            max_seq_len: self.max_seq_len,
            feature_dim: self.raw_dim * self.stack_window,
            lambda_st: self.lambda_st,
            specials: SpecialTokens::default(),
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            p_target: self.mask_p_target,
            p_mask: self.mask_p_mask,
            p_substitute: self.mask_p_substitute,
        }
    }
}
