//! Versioned key=value configuration.
//!
//! Plain text, one `key = value` per line, `#` comments. The schema is
//! closed: unknown keys are rejected, and the `version` key must match.
//! Serialization is canonical (sorted keys, version first), so
//! parse→serialize→parse is the identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected 'key = value'")]
    Malformed(usize),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("missing version key")]
    MissingVersion,
    #[error("unsupported config version {0}")]
    UnsupportedVersion(String),
    #[error("key '{key}': cannot parse '{value}' as {kind}")]
    BadValue {
        key: String,
        value: String,
        kind: &'static str,
    },
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
}

/// All recognized keys. Flat names; values are free-form strings checked
/// by the typed getters.
pub const KNOWN_KEYS: &[&str] = &[
    "version",
    // world
    "world_speakers",
    "world_phonemes",
    "world_channels",
    "embed_dim",
    "sigma_obs",
    "delta_min",
    "duration_jitter",
    "holdout_speakers",
    // data
    "data_path",
    "reference_path",
    "utterances_per_speaker",
    "min_phonemes",
    "max_phonemes",
    "reference_index",
    // schedule
    "beta0",
    "beta1",
    // sampler
    "steps",
    "temperature",
    "noise_at_every_step",
    "scale_step_noise",
    // guidance
    "gamma_s",
    "gamma_t",
    "guidance_mode",
    // score model
    "score_hidden",
    "score_depth",
    // aux models
    "classifier_hidden",
    "classifier_depth",
    "duration_hidden",
    "encoder_hidden",
    "classifier_iterations",
    "duration_iterations",
    "encoder_iterations",
    "eval_classifier_iterations",
    // training
    "stage",
    "lr",
    "iterations",
    "batch",
    "dropout_p",
    "reset_optimizer",
    "crop_frames",
    "t_min",
    "pretrain_iterations",
    "cfg_iterations",
    // synthesis + experiments
    "speaker_encoder",
    "synthesis_phonemes",
    "synthesis_runs",
    "sweep_gamma_s",
    "experiment_iterations",
    "experiment_optimizer",
];

/// Parsed configuration: validated keys with string values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: BTreeMap::from([(String::from("version"), CONFIG_VERSION.to_string())]),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Malformed(lineno + 1))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        let version = values
            .get("version")
            .ok_or(ConfigError::MissingVersion)?
            .clone();
        if version.parse::<u32>().ok() != Some(CONFIG_VERSION) {
            return Err(ConfigError::UnsupportedVersion(version));
        }
        Ok(Config { values })
    }

    /// Canonical rendering: version first, then remaining keys sorted.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version = {}", self.values["version"]).unwrap();
        for (key, value) in &self.values {
            if key == "version" {
                continue;
            }
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(
            KNOWN_KEYS.contains(&key),
            "attempt to set unknown config key '{key}'"
        );
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                kind: "f64",
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                kind: "usize",
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                kind: "bool",
            }),
        }
    }

    pub fn get_str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or(default)
    }

    /// Comma-separated f64 list. An empty value is an empty list.
    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: v.clone(),
                        kind: "f64 list",
                    })
                })
                .collect(),
        }
    }

    /// Comma-separated usize list. An empty value is an empty list.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: v.clone(),
                        kind: "usize list",
                    })
                })
                .collect(),
        }
    }
}
