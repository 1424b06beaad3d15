//! `key=value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to [`TrainConfig::default`]; unknown or repeated keys are errors.
//! `clip_norm=none` disables clipping and `vocab_size=0` means "size of the
//! corpus vocabulary".

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glacnet_core::train::TrainConfig;

use crate::IoError;

/// Training configuration plus settings that only exist on the std side.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Exempt-word list; the built-in list is used when unset.
    pub exempt_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            exempt_file: None,
        }
    }
}

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 27] = [
    "learning_rate",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "patience",
    "clip_norm",
    "min_count",
    "plain_seq2seq",
    "feature_dim",
    "encoder_hidden",
    "glocal_dim",
    "use_global",
    "use_local",
    "dropout",
    "embed_dim",
    "decoder_hidden",
    "cascading",
    "max_len",
    "vocab_size",
    "k",
    "n_samples",
    "sampler_seed",
    "use_count_penalty",
    "greedy",
    "reset_per_sentence",
    "exempt_file",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String> {
    raw.parse()
        .map_err(|_| format!("invalid value {raw:?} for {key}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| IoError::Config { line: lineno, message };
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            config.set(key, raw).map_err(err)?;
        }
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|e| IoError::open(path, e))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_text()).map_err(|e| IoError::open(path, e))
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "weight_decay" => t.weight_decay = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "epochs" => t.epochs = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "patience" => t.patience = value(key, raw)?,
            "clip_norm" => {
                t.clip_norm = match raw {
                    "none" => None,
                    _ => Some(value(key, raw)?),
                }
            }
            "min_count" => t.min_count = value(key, raw)?,
            "plain_seq2seq" => t.plain_seq2seq = value(key, raw)?,
            "feature_dim" => t.encoder.feature_dim = value(key, raw)?,
            "encoder_hidden" => t.encoder.hidden_size = value(key, raw)?,
            "glocal_dim" => t.encoder.glocal_dim = value(key, raw)?,
            "use_global" => t.encoder.use_global = value(key, raw)?,
            "use_local" => t.encoder.use_local = value(key, raw)?,
            "dropout" => t.encoder.dropout = value(key, raw)?,
            "embed_dim" => t.decoder.embed_dim = value(key, raw)?,
            "decoder_hidden" => t.decoder.hidden_size = value(key, raw)?,
            "cascading" => t.decoder.cascading = value(key, raw)?,
            "max_len" => t.decoder.max_len = value(key, raw)?,
            "vocab_size" => t.decoder.vocab_size = value(key, raw)?,
            "k" => t.sampler.k = value(key, raw)?,
            "n_samples" => t.sampler.n_samples = value(key, raw)?,
            "sampler_seed" => t.sampler.seed = value(key, raw)?,
            "use_count_penalty" => t.sampler.use_count_penalty = value(key, raw)?,
            "greedy" => t.sampler.greedy = value(key, raw)?,
            "reset_per_sentence" => t.sampler.reset_per_sentence = value(key, raw)?,
            "exempt_file" => {
                self.exempt_file = match raw {
                    "" => None,
                    _ => Some(PathBuf::from(raw)),
                }
            }
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// The textual value of one field, as [`set`](Self::set) accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "patience" => t.patience.to_string(),
            "clip_norm" => t.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            "min_count" => t.min_count.to_string(),
            "plain_seq2seq" => t.plain_seq2seq.to_string(),
            "feature_dim" => t.encoder.feature_dim.to_string(),
            "encoder_hidden" => t.encoder.hidden_size.to_string(),
            "glocal_dim" => t.encoder.glocal_dim.to_string(),
            "use_global" => t.encoder.use_global.to_string(),
            "use_local" => t.encoder.use_local.to_string(),
            "dropout" => t.encoder.dropout.to_string(),
            "embed_dim" => t.decoder.embed_dim.to_string(),
            "decoder_hidden" => t.decoder.hidden_size.to_string(),
            "cascading" => t.decoder.cascading.to_string(),
            "max_len" => t.decoder.max_len.to_string(),
            "vocab_size" => t.decoder.vocab_size.to_string(),
            "k" => t.sampler.k.to_string(),
            "n_samples" => t.sampler.n_samples.to_string(),
            "sampler_seed" => t.sampler.seed.to_string(),
            "use_count_penalty" => t.sampler.use_count_penalty.to_string(),
            "greedy" => t.sampler.greedy.to_string(),
            "reset_per_sentence" => t.sampler.reset_per_sentence.to_string(),
            "exempt_file" => self
                .exempt_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => return None,
        })
    }

    /// All keys, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }
}
