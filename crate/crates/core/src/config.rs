//! Run configuration: one JSON document covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::DEFAULT_DOMAINS;
use crate::bench::SynthConfig;
use crate::error::{Error, Result};
use crate::stylegen::StyleGenConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "PTTA_SEED";

pub const DEFAULT_CLASSES: [&str; 7] = ["dog", "elephant", "giraffe", "guitar", "horse", "house", "person"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            feature_dim: 64,
        }
    }
}

/// How adapter keys are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyInit {
    #[default]
    Template,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub domains: Vec<String>,
    pub init: KeyInit,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            domains: DEFAULT_DOMAINS.iter().map(|s| s.to_string()).collect(),
            init: KeyInit::Template,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let grid = vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
        Self {
            seeds: (0..5).collect(),
            alphas: grid.clone(),
            betas: grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: Vec<String>,
    pub encoder: EncoderConfig,
    pub stylegen: StyleGenConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            encoder: EncoderConfig::default(),
            stylegen: StyleGenConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn distinct_names(field: &str, names: &[String], min: usize) -> Result<()> {
    if names.len() < min {
        return Err(Error::config(field, format!("needs at least {min} entries, got {}", names.len())));
    }
    for (i, name) in names.iter().enumerate() {
        if name.split_whitespace().next().is_none() {
            return Err(Error::config(field, format!("entry {i} is blank")));
        }
        if names[..i].contains(name) {
            return Err(Error::config(field, format!("duplicate entry {name:?}")));
        }
    }
    Ok(())
}

fn finite_grid(field: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(field, "must be non-empty"));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::config(field, format!("entries must be finite and non-negative, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    /// Parses and validates a JSON document. Missing keys take defaults.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let config: Self = serde_json::from_slice(bytes)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        distinct_names("classes", &self.classes, 2)?;
        distinct_names("adapter.domains", &self.adapter.domains, 1)?;
        if self.encoder.token_dim == 0 {
            return Err(Error::config("encoder.token_dim", "must be at least 1"));
        }
        if self.encoder.feature_dim == 0 {
            return Err(Error::config("encoder.feature_dim", "must be at least 1"));
        }
        self.stylegen.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.bench.seeds.is_empty() {
            return Err(Error::config("bench.seeds", "must be non-empty"));
        }
        finite_grid("bench.alphas", &self.bench.alphas)?;
        finite_grid("bench.betas", &self.bench.betas)?;
        if self.bench.betas.contains(&0.0) {
            return Err(Error::config("bench.betas", "entries must be positive"));
        }
        Ok(())
    }

    /// Applies `key=value`. `key` is a dotted path (`train.alpha`) or a leaf
    /// name that occurs in exactly one section (`alpha`). `value` is parsed
    /// as JSON, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let path = resolve_key(&doc, key)?;
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut doc;
        for part in &path {
            slot = slot.get_mut(part.as_str()).expect("resolved path exists");
        }
        *slot = parsed;
        let updated: Self = serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies a list of `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Replaces `seed` with the parsed value of `PTTA_SEED` when given.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(raw) = value {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {raw:?}")))?;
        }
        Ok(())
    }
}

fn resolve_key(doc: &Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.len() > 1 || doc.get(key).is_some() {
        let mut node = doc;
        for part in &parts {
            node = node
                .get(part.as_str())
                .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        }
        return Ok(parts);
    }
    let matches: Vec<&String> = doc
        .as_object()
        .expect("config is an object")
        .iter()
        .filter(|(_, section)| section.get(key).is_some())
        .map(|(name, _)| name)
        .collect();
    match matches.as_slice() {
        [section] => Ok(vec![section.to_string(), key.to_string()]),
        [] => Err(Error::config(key, "unknown configuration key")),
        many => Err(Error::config(
            key,
            format!("ambiguous; qualify it as one of {}", many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")),
        )),
    }
}
