//! Run configuration: flat UTF-8 `key = value` lines with dotted keys.
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! rejected. Later assignments override earlier ones, so command-line
//! overrides are applied with [`RunConfig::set`] after the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::labels::LanguageInventory;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_TRAIN_TOPIC: &str = "brexit";
pub const DEFAULT_DEV_TOPIC: &str = "asia_bibi";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Embedding layer count `m`.
    pub layers: usize,
    pub languages: LanguageInventory,
    pub lang_clf: bool,
    pub max_len: usize,
    pub train_topics: Vec<String>,
    pub dev_topics: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            layers: 12,
            languages: LanguageInventory::default(),
            lang_clf: true,
            max_len: 128,
            train_topics: vec![DEFAULT_TRAIN_TOPIC.into()],
            dev_topics: vec![DEFAULT_DEV_TOPIC.into()],
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    /// Every accepted key, sorted.
    pub fn keys() -> Vec<&'static str> {
        let mut keys = vec![
            "data.dev_topics",
            "data.max_len",
            "data.train_topics",
            "embed.layers",
            "encoder.attn_heads",
            "encoder.dropout",
            "encoder.input_dim",
            "encoder.key_dim",
            "encoder.labels",
            "encoder.lstm_hidden",
            "encoder.residual",
            "encoder.value_dim",
            "model.lang_clf",
            "model.languages",
            "train.adam_eps",
            "train.base_lr",
            "train.batch_size",
            "train.beta1",
            "train.beta2",
            "train.clip_norm",
            "train.early_stop_patience",
            "train.max_epochs",
            "train.seed",
            "train.warmup_fraction",
            "train.weight_decay",
        ];
        keys.sort_unstable();
        keys
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let e = &mut self.encoder;
        let t = &mut self.train;
        match key.trim() {
            "data.dev_topics" => self.dev_topics = parse_list(v),
            "data.max_len" => self.max_len = parse_value(key, v)?,
            "data.train_topics" => self.train_topics = parse_list(v),
            "embed.layers" => self.layers = parse_value(key, v)?,
            "encoder.attn_heads" => e.attn_heads = parse_value(key, v)?,
            "encoder.dropout" => e.dropout = parse_value(key, v)?,
            "encoder.input_dim" => e.input_dim = parse_value(key, v)?,
            "encoder.key_dim" => e.key_dim = parse_value(key, v)?,
            "encoder.labels" => e.labels = parse_value(key, v)?,
            "encoder.lstm_hidden" => e.lstm_hidden = parse_value(key, v)?,
            "encoder.residual" => e.residual = parse_value(key, v)?,
            "encoder.value_dim" => e.value_dim = parse_value(key, v)?,
            "model.lang_clf" => self.lang_clf = parse_value(key, v)?,
            "model.languages" => self.languages = LanguageInventory::new(parse_list(v)),
            "train.adam_eps" => t.adam_eps = parse_value(key, v)?,
            "train.base_lr" => t.base_lr = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.beta1" => t.beta1 = parse_value(key, v)?,
            "train.beta2" => t.beta2 = parse_value(key, v)?,
            "train.clip_norm" => t.clip_norm = parse_value(key, v)?,
            "train.early_stop_patience" => t.early_stop_patience = parse_value(key, v)?,
            "train.max_epochs" => t.max_epochs = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.warmup_fraction" => t.warmup_fraction = parse_value(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let e = &self.encoder;
        let t = &self.train;
        [
            ("data.dev_topics", self.dev_topics.join(",")),
            ("data.max_len", self.max_len.to_string()),
            ("data.train_topics", self.train_topics.join(",")),
            ("embed.layers", self.layers.to_string()),
            ("encoder.attn_heads", e.attn_heads.to_string()),
            ("encoder.dropout", e.dropout.to_string()),
            ("encoder.input_dim", e.input_dim.to_string()),
            ("encoder.key_dim", e.key_dim.to_string()),
            ("encoder.labels", e.labels.to_string()),
            ("encoder.lstm_hidden", e.lstm_hidden.to_string()),
            ("encoder.residual", e.residual.to_string()),
            ("encoder.value_dim", e.value_dim.to_string()),
            ("model.lang_clf", self.lang_clf.to_string()),
            ("model.languages", self.languages.tags().join(",")),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.warmup_fraction", t.warmup_fraction.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
        ]
        .into_iter()
        .collect()
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.encoder.clone(), self.layers, self.languages.clone(), self.lang_clf)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.layers == 0 {
            return Err(ConfigError::Invalid("embed.layers must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(ConfigError::Invalid("data.max_len must be at least 2".into()));
        }
        if self.languages.is_empty() {
            return Err(ConfigError::Invalid("model.languages is empty".into()));
        }
        Ok(())
    }
}
