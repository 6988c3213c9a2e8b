//! Run configuration with a line-based `key = value` file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DEFAULT_MIN_COUNT, DEFAULT_UNROLL};
use crate::neural::{Architecture, ModelConfig, TrainConfig, DEFAULT_C, DEFAULT_HIDDEN, DEFAULT_MEMORY};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// lstm, attention or pointer.
    pub arch: String,
    /// Attention window or pointer memory size K.
    pub memory: usize,
    pub c: f64,
    pub hidden: usize,
    pub min_count: u64,
    /// Largest vocabulary size, specials included.
    pub vocab_cap: Option<usize>,
    /// Defaults to 30 for the pointer model and 75 otherwise.
    pub batch_size: Option<usize>,
    pub unroll: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub clip: f64,
    pub dropout: f64,
    pub seed: u64,
    pub sample_size: Option<usize>,
    pub deterministic: bool,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "pointer".into(),
            memory: DEFAULT_MEMORY,
            c: DEFAULT_C,
            hidden: DEFAULT_HIDDEN,
            min_count: DEFAULT_MIN_COUNT,
            vocab_cap: None,
            batch_size: None,
            unroll: DEFAULT_UNROLL,
            epochs: 10,
            lr: 0.7,
            decay: 0.9,
            clip: 5.0,
            dropout: 0.1,
            seed: 1,
            sample_size: None,
            deterministic: false,
            corpus: None,
            vocab: None,
            checkpoint: None,
            report: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "arch", "memory", "c", "hidden", "min_count", "vocab_cap", "batch_size", "unroll", "epochs", "lr",
    "decay", "clip", "dropout", "seed", "sample_size", "deterministic", "corpus", "vocab", "checkpoint",
    "report",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "arch" => self.arch = v.to_string(),
            "memory" | "window" => self.memory = parse(key, v)?,
            "c" => self.c = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "vocab_cap" => self.vocab_cap = optional(key, v)?,
            "batch_size" => self.batch_size = optional(key, v)?,
            "unroll" => self.unroll = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sample_size" => self.sample_size = optional(key, v)?,
            "deterministic" => self.deterministic = parse(key, v)?,
            "corpus" => self.corpus = optional(key, v)?,
            "vocab" => self.vocab = optional(key, v)?,
            "checkpoint" => self.checkpoint = optional(key, v)?,
            "report" => self.report = optional(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, found {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey(_) | ConfigError::BadValue { .. } => {
                    ConfigError::Syntax { line: i + 1, msg: e.to_string() }
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Renders every field as `key = value`, readable by [`apply_text`].
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let path = |p: &Option<PathBuf>| opt(p.as_ref().map(|p| p.display().to_string()));
        let mut s = String::new();
        let fields: Vec<(&str, String)> = vec![
            ("arch", self.arch.clone()),
            ("memory", self.memory.to_string()),
            ("c", self.c.to_string()),
            ("hidden", self.hidden.to_string()),
            ("min_count", self.min_count.to_string()),
            ("vocab_cap", opt(self.vocab_cap.map(|v| v.to_string()))),
            ("batch_size", opt(self.batch_size.map(|v| v.to_string()))),
            ("unroll", self.unroll.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("decay", self.decay.to_string()),
            ("clip", self.clip.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("sample_size", opt(self.sample_size.map(|v| v.to_string()))),
            ("deterministic", self.deterministic.to_string()),
            ("corpus", path(&self.corpus)),
            ("vocab", path(&self.vocab)),
            ("checkpoint", path(&self.checkpoint)),
            ("report", path(&self.report)),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        match self.arch.as_str() {
            "lstm" => Ok(Architecture::Lstm),
            "attention" => Ok(Architecture::Attention { window: self.memory }),
            "pointer" => Ok(Architecture::Pointer { memory: self.memory, c: self.c }),
            other => Err(ConfigError::BadValue { key: "arch".into(), value: other.into() }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let arch = self.architecture()?;
        let positive = [
            ("memory", self.memory as f64),
            ("c", self.c),
            ("hidden", self.hidden as f64),
            ("min_count", self.min_count as f64),
            ("unroll", self.unroll as f64),
            ("epochs", self.epochs as f64),
            ("lr", self.lr),
            ("decay", self.decay),
            ("clip", self.clip),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("{k} must be positive")));
            }
        }
        if self.batch_size == Some(0) || self.vocab_cap.is_some_and(|v| v < 3) {
            return Err(ConfigError::Invalid("batch_size must be positive and vocab_cap at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid("dropout must be in [0, 1)".into()));
        }
        if self.sample_size.is_some() && matches!(arch, Architecture::Pointer { .. }) {
            return Err(ConfigError::Invalid("sampled softmax applies to lstm and attention only".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, ConfigError> {
        Ok(ModelConfig { arch: self.architecture()?, hidden: self.hidden, vocab_size })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let arch = self.architecture()?;
        Ok(TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            decay: self.decay,
            clip: self.clip,
            dropout: self.dropout,
            batch_size: self.batch_size.unwrap_or_else(|| arch.default_batch_size()),
            unroll: self.unroll,
            seed: self.seed,
            sample_size: self.sample_size,
            exec: if self.deterministic { Execution::Sequential } else { Execution::Parallel },
        })
    }
}
