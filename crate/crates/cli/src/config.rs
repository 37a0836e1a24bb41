//! Flat key-value run configuration.
//!
//! One `key = value` pair per line, `#` comments, unknown keys rejected.
//! Values are pulled through typed getters with documented defaults;
//! command-line flags override file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geca_core::{GecaError, Result};

/// Every key any command understands.
const ALLOWED_KEYS: &[&str] = &[
    // model
    "n_gamma",
    "n_h",
    "heads",
    "cond_dim",
    // training
    "dataset",
    "out_dir",
    "batch_size",
    "steps",
    "m_updates",
    "m_randomize",
    "fire_rate",
    "learning_rate",
    "label_drop",
    "schedule",
    "timesteps",
    "checkpoint_every",
    "seed",
    // sampling
    "height",
    "width",
    "guidance_w",
    "mode",
    "variant",
    // ablation
    "ablate_samples",
    "ablate_timesteps",
    "ablate_m",
    // expansion
    "checkpoint",
    "expand_factor",
    "expand_out",
    // classification
    "train_manifest",
    "val_manifest",
    "test_manifest",
    "augmented_manifest",
    "clf_steps",
    "clf_batch",
    "clf_lr",
    "clf_eval_every",
    "clf_threshold",
    "metrics_out",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory of the config file; relative paths resolve against it.
    root: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, root: &Path) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GecaError::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !ALLOWED_KEYS.contains(&key) {
                return Err(GecaError::Config(format!(
                    "unknown config key {:?} on line {}",
                    key,
                    lineno + 1
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(GecaError::Config(format!(
                    "duplicate config key {:?} on line {}",
                    key,
                    lineno + 1
                )));
            }
        }
        Ok(RunConfig {
            values,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GecaError::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(ALLOWED_KEYS.contains(&key));
        self.values.insert(key.to_string(), value);
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        let v = self.get_str(key).ok_or_else(|| {
            GecaError::Config(format!("config is missing required key {:?}", key))
        })?;
        Ok(self.resolve(v))
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.get_str(key).map(|v| self.resolve(v))
    }

    fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                GecaError::Config(format!("config key {:?} has invalid value {:?}", key, v))
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(GecaError::Config(format!(
                "config key {:?} expects true/false, got {:?}",
                key, v
            ))),
        }
    }
}
