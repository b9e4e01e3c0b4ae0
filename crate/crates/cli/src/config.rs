//! `key = value` run configuration with a fixed schema.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use revlm::blocks::{BlockKind, ModelConfig};
use revlm::data::{ByteTokenizer, CharVocab};
use revlm::engine::OptimConfig;
use revlm::DType;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Byte,
    Char,
}

impl TokenizerKind {
    fn name(self) -> &'static str {
        match self {
            TokenizerKind::Byte => "byte",
            TokenizerKind::Char => "char",
        }
    }
}

/// Every setting of a run. Defaults describe the desk-scale byte-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub block: BlockKind,
    pub dtype: DType,
    pub seed: u64,
    /// Corpus path, or `synthetic` for the built-in generated prose.
    pub data: Option<String>,
    pub out: PathBuf,
    pub tokenizer: TokenizerKind,
    /// Character table of the char tokenizer, filled in from the corpus.
    pub charset: Vec<char>,
    pub context: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub step_size: f64,
    /// Empty means "draw from the seed".
    pub a_schedule: Vec<f64>,
    pub fixed_point_iters: usize,
    pub ln_eps: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Zero disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub eval_windows: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub kl_steps: usize,
    pub kl_lr: f64,
    pub kl_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            block: BlockKind::Baseline,
            dtype: DType::F32,
            seed: 0,
            data: None,
            out: PathBuf::from("run"),
            tokenizer: TokenizerKind::Byte,
            charset: Vec::new(),
            context: 128,
            width: 128,
            heads: 4,
            layers: 8,
            step_size: 1.0,
            a_schedule: Vec::new(),
            fixed_point_iters: 3,
            ln_eps: revlm::numerics::DEFAULT_LN_EPS,
            lr: 1e-3,
            min_lr: 1e-4,
            warmup: 100,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 1,
            val_fraction: 0.05,
            eval_every: 100,
            eval_windows: 16,
            log_every: 10,
            checkpoint_every: 500,
            kl_steps: 300,
            kl_lr: 3e-4,
            kl_batch: 4,
        }
    }
}

pub const KEYS: &[&str] = &[
    "block",
    "dtype",
    "seed",
    "data",
    "out",
    "tokenizer",
    "charset",
    "context",
    "width",
    "heads",
    "layers",
    "step_size",
    "a_schedule",
    "fixed_point_iters",
    "ln_eps",
    "lr",
    "min_lr",
    "warmup",
    "steps",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "val_fraction",
    "eval_every",
    "eval_windows",
    "log_every",
    "checkpoint_every",
    "kl_steps",
    "kl_lr",
    "kl_batch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{value}`")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn split_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "block" => self.block = value.parse().map_err(|e: revlm::Error| CliError::Usage(e.to_string()))?,
            "dtype" => self.dtype = value.parse().map_err(CliError::Usage)?,
            "seed" => self.seed = parse(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| value.to_string()),
            "out" => self.out = PathBuf::from(value),
            "tokenizer" => {
                self.tokenizer = match value {
                    "byte" => TokenizerKind::Byte,
                    "char" => TokenizerKind::Char,
                    _ => return Err(CliError::Usage(format!("`tokenizer`: expected byte or char, got `{value}`"))),
                }
            }
            "charset" => {
                let codes: Vec<u32> = split_list(key, value)?;
                self.charset = codes
                    .into_iter()
                    .map(|c| char::from_u32(c).ok_or_else(|| CliError::Usage(format!("`charset`: bad code point {c}"))))
                    .collect::<Result<_>>()?;
            }
            "context" => self.context = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "step_size" => self.step_size = parse(key, value)?,
            "a_schedule" => self.a_schedule = split_list(key, value)?,
            "fixed_point_iters" => self.fixed_point_iters = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_windows" => self.eval_windows = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "kl_steps" => self.kl_steps = parse(key, value)?,
            "kl_lr" => self.kl_lr = parse(key, value)?,
            "kl_batch" => self.kl_batch = parse(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "block" => self.block.name().to_string(),
            "dtype" => self.dtype.name().to_string(),
            "seed" => self.seed.to_string(),
            "data" => self.data.clone().unwrap_or_default(),
            "out" => self.out.display().to_string(),
            "tokenizer" => self.tokenizer.name().to_string(),
            "charset" => join(&self.charset.iter().map(|&c| c as u32).collect::<Vec<_>>()),
            "context" => self.context.to_string(),
            "width" => self.width.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "step_size" => self.step_size.to_string(),
            "a_schedule" => join(&self.a_schedule),
            "fixed_point_iters" => self.fixed_point_iters.to_string(),
            "ln_eps" => self.ln_eps.to_string(),
            "lr" => self.lr.to_string(),
            "min_lr" => self.min_lr.to_string(),
            "warmup" => self.warmup.to_string(),
            "steps" => self.steps.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_windows" => self.eval_windows.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "kl_steps" => self.kl_steps.to_string(),
            "kl_lr" => self.kl_lr.to_string(),
            "kl_batch" => self.kl_batch.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Parses `key = value` lines; `#` starts a comment. Later keys win.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Canonical text: every key in schema order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        match self.tokenizer {
            TokenizerKind::Byte => ByteTokenizer::VOCAB_SIZE,
            TokenizerKind::Char => self.charset.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self.tokenizer {
            TokenizerKind::Byte => Ok(ByteTokenizer.encode(text)),
            TokenizerKind::Char => {
                let vocab = CharVocab::from_text(&self.charset.iter().collect::<String>());
                Ok(vocab.encode(text)?)
            }
        }
    }

    /// Freezes data-dependent and random choices so the config alone rebuilds the model.
    pub fn resolve(&mut self, text: &str) {
        if self.tokenizer == TokenizerKind::Char && self.charset.is_empty() {
            let mut chars: Vec<char> = text.chars().collect();
            chars.sort_unstable();
            chars.dedup();
            self.charset = chars;
        }
        if self.a_schedule.is_empty() {
            let probe = ModelConfig::new(self.block, 1, 1, 1, 1, self.layers).with_default_schedule(self.seed);
            self.a_schedule = probe.a_schedule;
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.block, self.vocab_size(), self.context, self.width, self.heads, self.layers)
            .with_dtype(self.dtype)
            .with_step_size(self.step_size)
            .with_default_schedule(self.seed);
        if matches!(self.block, BlockKind::MidpointA | BlockKind::Retrofit) && !self.a_schedule.is_empty() {
            cfg.a_schedule = self.a_schedule.clone();
        }
        cfg.fixed_point_iters = self.fixed_point_iters;
        cfg.ln_eps = self.ln_eps;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup,
            total_steps: self.steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }
}
