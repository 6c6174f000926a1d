//! Flat `key = value` run configuration with typed accessors.
//!
//! One namespace with dotted keys; unknown keys are a hard error so a
//! typo cannot silently fall back to a default. Every run logs the fully
//! resolved configuration, and checkpoints echo it verbatim.

use indexmap::IndexMap;

use crate::{Result, VvError};

/// All recognized keys with their defaults.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("dataset.identities", "4"),
    ("dataset.actions", "4"),
    ("dataset.clips_per_class", "8"),
    ("dataset.T", "8"),
    ("dataset.H", "32"),
    ("dataset.W", "32"),
    ("dataset.C", "1"),
    ("dataset.labeled_fraction", "0.2"),
    ("dataset.seed", "1"),
    ("model.profile", "desk"),
    ("model.latent_dim", ""),
    ("model.hidden_dim", ""),
    ("model.C", "true"),
    ("model.S", "true"),
    ("train.epochs", "200"),
    ("train.classifier_epochs", "50"),
    ("train.batch", "16"),
    ("train.lr", "1e-4"),
    ("train.beta", "1.0"),
    ("train.kl_warmup_steps", "0"),
    ("train.seed", "1"),
    ("train.snapshot_interval", "200"),
    ("generate.frames", "8"),
    ("generate.seed", "1"),
    ("generate.temperature", "1.0"),
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    entries: IndexMap<String, String>,
}

impl RunConfig {
    /// Defaults for every known key.
    pub fn defaults() -> Self {
        let mut entries = IndexMap::new();
        for (k, v) in KNOWN_KEYS {
            if !v.is_empty() {
                entries.insert((*k).to_string(), (*v).to_string());
            }
        }
        RunConfig { entries }
    }

    fn check_key(key: &str) -> Result<()> {
        if KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            Ok(())
        } else {
            Err(VvError::Parameter(format!("unknown config key {key:?}")))
        }
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VvError::Parameter(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Defaults overlaid with this config's explicit entries.
    pub fn resolve(&self) -> RunConfig {
        let mut merged = Self::defaults();
        for (k, v) in &self.entries {
            merged.entries.insert(k.clone(), v.clone());
        }
        merged
    }

    /// Overlay another config's explicit entries on top of this one.
    pub fn merge(&mut self, overrides: &RunConfig) {
        for (k, v) in &overrides.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        Self::check_key(key)?;
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| VvError::Parameter(format!("missing config key {key:?}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|_| VvError::Parameter(format!("config key {key} must be an integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.require(key)?
            .parse()
            .map_err(|_| VvError::Parameter(format!("config key {key} must be an integer")))
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        self.require(key)?
            .parse()
            .map_err(|_| VvError::Parameter(format!("config key {key} must be a number")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|_| VvError::Parameter(format!("config key {key} must be a number")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(VvError::Parameter(format!(
                "config key {key} must be a boolean, got {other:?}"
            ))),
        }
    }

    /// Canonical text form (stable order), usable as a config file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
