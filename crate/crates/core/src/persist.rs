//! On-disk trained models: two PTAF matrices plus a JSON descriptor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{LinearClassifier, Model, TextAdapter};
use crate::error::{Error, Result};
use crate::featio::{read_matrix, write_matrix, FeatureMatrix, VERSION};

pub const MODEL_FILE: &str = "model.json";
pub const MODEL_FORMAT: &str = "promptta-model";
pub const CLASSIFIER_FILE: &str = "classifier.ptaf";
pub const ADAPTER_FILE: &str = "adapter.ptaf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Run configuration the model was trained with.
    #[serde(default)]
    pub config: Value,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!("model format is {:?}, expected {MODEL_FORMAT:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported model version {}", self.version)));
        }
        if self.dim == 0 || self.class_names.is_empty() || self.domain_names.is_empty() {
            return Err(Error::Format("model needs a positive dim, classes and domains".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite() && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Format(format!("invalid alpha/beta {}/{}", self.alpha, self.beta)));
        }
        Ok(())
    }
}

pub fn parse_model_manifest(bytes: &[u8]) -> Result<ModelManifest> {
    let manifest: ModelManifest = serde_json::from_slice(bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_model(model: &Model, class_names: &[String], seed: u64, config: Value, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&FeatureMatrix::from_tensor(model.classifier.weights())?, dir.join(CLASSIFIER_FILE))?;
    write_matrix(
        &FeatureMatrix::from_tensor(model.adapter.keys())?.with_unit_norm()?,
        dir.join(ADAPTER_FILE),
    )?;
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        dim: model.classifier.dim(),
        class_names: class_names.to_vec(),
        domain_names: model.adapter.domain_names().to_vec(),
        alpha: model.adapter.alpha,
        beta: model.adapter.beta,
        seed,
        config,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(MODEL_FILE);
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Loads a model. Weights round-trip through `f32`.
pub fn read_model(dir: &Path) -> Result<(Model, ModelManifest)> {
    let path = dir.join(MODEL_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = parse_model_manifest(&bytes).map_err(|e| e.context(path.display().to_string()))?;
    let weights = read_matrix(dir.join(CLASSIFIER_FILE))?;
    let keys = read_matrix(dir.join(ADAPTER_FILE))?;
    let n = manifest.class_names.len();
    let k = manifest.domain_names.len();
    for (what, m, rows) in [("classifier", &weights, n), ("adapter", &keys, n * k)] {
        if m.rows() != rows || m.dim() != manifest.dim {
            return Err(Error::Consistency {
                what: what.into(),
                declared: format!("{rows}x{}", manifest.dim),
                stored: m.shape_string(),
            });
        }
    }
    let model = Model {
        classifier: LinearClassifier::new(weights.to_tensor())?,
        adapter: TextAdapter::new(keys.to_tensor(), n, manifest.domain_names.clone(), manifest.alpha, manifest.beta)?,
    };
    Ok((model, manifest))
}
