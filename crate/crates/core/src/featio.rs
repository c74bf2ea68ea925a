//! The PTAF matrix file format and the feature-bundle directory layout.
//!
//! A PTAF file is a 20-byte little-endian header followed by the payload:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `PTAF`                   |
//! | 4      | 4    | format version, `u32` = 1      |
//! | 8      | 4    | rows `R`, `u32`                |
//! | 12     | 4    | dim `D`, `u32`                 |
//! | 16     | 4    | flags, `u32` (bit 0 unit-norm) |
//! | 20     | 4·R·D| row-major IEEE-754 binary32    |
//!
//! A bundle is a directory with a `manifest.json` naming one PTAF file per
//! matrix. Adapter rows are class-major: row `j·K + k` holds class `j` under
//! domain `k`. Style rows are style-major: row `i·N + j` holds style `i` of
//! class `j`.

use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numdiff::Tensor;

pub const MAGIC: [u8; 4] = *b"PTAF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const FLAG_UNIT_NORM: u32 = 1;

/// Allowed deviation of a unit-norm row from norm 1 after binary32 storage.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT: &str = "ptaf-bundle";

/// Dense `rows × dim` matrix held at 64-bit precision in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    unit_norm: bool,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Data(format!("matrix must be non-empty, got {rows}x{dim}")));
        }
        if data.len() != rows * dim {
            return Err(Error::Data(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}, column {}", i / dim, i % dim)));
        }
        Ok(Self {
            rows,
            dim,
            data,
            unit_norm: false,
        })
    }

    /// A matrix whose rows are all unit-norm; checked.
    pub fn unit_rows(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(rows, dim, data)?.with_unit_norm()
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let (r, c) = tensor.shape().dims();
        Self::new(r, c, tensor.data().to_vec())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::from_tensor(&Tensor::from_rows(rows)?)
    }

    /// Sets the unit-norm flag after verifying every row.
    pub fn with_unit_norm(mut self) -> Result<Self> {
        self.check_unit_rows()?;
        self.unit_norm = true;
        Ok(self)
    }

    pub fn check_unit_rows(&self) -> Result<()> {
        for i in 0..self.rows {
            let norm = self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Data(format!("row {i} flagged unit-norm has norm {norm}")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.dim, self.data.clone()).expect("validated on construction")
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.dim)
    }
}

/// Serializes a matrix to PTAF bytes. Values are rounded to binary32.
pub fn encode_matrix(matrix: &FeatureMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(matrix.rows).map_err(|_| Error::Format("row count exceeds u32".into()))?;
    let dim = u32::try_from(matrix.dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    let flags = if matrix.unit_norm { FLAG_UNIT_NORM } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for (i, &v) in matrix.data.iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Data(format!("value {v} at index {i} overflows binary32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Parses PTAF bytes. Never panics on malformed input.
pub fn decode_matrix(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = read_u32(bytes, 8) as u64;
    let dim = read_u32(bytes, 12) as u64;
    let flags = read_u32(bytes, 16);
    if rows == 0 || dim == 0 {
        return Err(Error::Format(format!("empty matrix {rows}x{dim}")));
    }
    if flags & !FLAG_UNIT_NORM != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Format(format!("matrix {rows}x{dim} too large")))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Length {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let dim = dim as usize;
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at row {}, column {}", i / dim, i % dim)));
    }
    let matrix = FeatureMatrix::new(rows as usize, dim, data)?;
    if flags & FLAG_UNIT_NORM != 0 {
        matrix.with_unit_norm()
    } else {
        Ok(matrix)
    }
}

pub fn write_matrix(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(matrix)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// The `manifest.json` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub content_features: String,
    pub adapter_features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_styles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_vectors: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_domains: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_domain_names: Option<Vec<String>>,
}

impl Manifest {
    /// Structural checks that need no matrix data.
    pub fn validate(&self) -> Result<()> {
        if self.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!("manifest format is {:?}, expected {BUNDLE_FORMAT:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", self.version)));
        }
        if self.dim == 0 {
            return Err(Error::Format("manifest dim must be positive".into()));
        }
        if self.class_names.is_empty() || self.domain_names.is_empty() {
            return Err(Error::Format("class_names and domain_names must be non-empty".into()));
        }
        for file in self.files() {
            check_relative(file)?;
        }
        if self.style_features.is_some() != self.num_styles.is_some() {
            return Err(Error::Format("style_features and num_styles must appear together".into()));
        }
        if self.style_vectors.is_some() && self.style_features.is_none() {
            return Err(Error::Format("style_vectors requires style_features".into()));
        }
        if self.eval_features.is_some() != self.eval_labels.is_some() {
            return Err(Error::Format("eval_features and eval_labels must appear together".into()));
        }
        if let Some(labels) = &self.eval_labels {
            let n = self.class_names.len();
            if let Some(bad) = labels.iter().find(|&&l| l >= n) {
                return Err(Error::Data(format!("eval label {bad} out of range for {n} classes")));
            }
        }
        match (&self.eval_domains, &self.eval_domain_names) {
            (None, None) => {}
            (Some(domains), Some(names)) => {
                if self.eval_labels.as_ref().map(Vec::len) != Some(domains.len()) {
                    return Err(Error::Consistency {
                        what: "eval_domains".into(),
                        declared: format!("{} labels", self.eval_labels.as_ref().map_or(0, Vec::len)),
                        stored: format!("{} domain ids", domains.len()),
                    });
                }
                if let Some(bad) = domains.iter().find(|&&d| d >= names.len()) {
                    return Err(Error::Data(format!("eval domain {bad} out of range for {} names", names.len())));
                }
            }
            _ => return Err(Error::Format("eval_domains and eval_domain_names must appear together".into())),
        }
        Ok(())
    }

    fn files(&self) -> impl Iterator<Item = &String> {
        [&self.content_features, &self.adapter_features]
            .into_iter()
            .chain(self.style_features.iter())
            .chain(self.style_vectors.iter())
            .chain(self.eval_features.iter())
    }
}

fn check_relative(file: &str) -> Result<()> {
    let path = Path::new(file);
    let plain = !file.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
    if !plain {
        return Err(Error::Format(format!("matrix path {file:?} must be a plain relative path")));
    }
    Ok(())
}

/// Parses and validates manifest JSON.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Held-out evaluation features with labels and optional domain groups.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBlock {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub domains: Option<(Vec<usize>, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    /// `N × D`, one row per class-name prompt.
    pub content_features: FeatureMatrix,
    /// `N·K × D`, class-major.
    pub adapter_features: FeatureMatrix,
    /// `M·N × D`, style-major.
    pub style_features: Option<FeatureMatrix>,
    /// `M × d_tok` learned style word vectors.
    pub style_vectors: Option<FeatureMatrix>,
    pub eval: Option<EvalBlock>,
}

impl FeatureBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn dim(&self) -> usize {
        self.content_features.dim()
    }

    pub fn num_styles(&self) -> Option<usize> {
        self.style_features
            .as_ref()
            .map(|s| s.rows() / self.num_classes().max(1))
    }

    /// Index of the adapter row for class `j` and domain `k`.
    pub fn adapter_row(&self, class: usize, domain: usize) -> usize {
        class * self.num_domains() + domain
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: BUNDLE_FORMAT.into(),
            version: VERSION,
            dim: self.dim(),
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            content_features: "content.ptaf".into(),
            adapter_features: "adapter.ptaf".into(),
            num_styles: self.num_styles(),
            style_features: self.style_features.as_ref().map(|_| "styles.ptaf".into()),
            style_vectors: self.style_vectors.as_ref().map(|_| "style_vectors.ptaf".into()),
            eval_features: self.eval.as_ref().map(|_| "eval.ptaf".into()),
            eval_labels: self.eval.as_ref().map(|e| e.labels.clone()),
            eval_domains: self.eval.as_ref().and_then(|e| e.domains.as_ref().map(|d| d.0.clone())),
            eval_domain_names: self.eval.as_ref().and_then(|e| e.domains.as_ref().map(|d| d.1.clone())),
        }
    }

    /// Checks every shape against the names and the shared dimension.
    pub fn validate(&self) -> Result<()> {
        let manifest = self.manifest();
        manifest.validate()?;
        check_shape("content_features", &self.content_features, self.num_classes(), manifest.dim)?;
        check_shape(
            "adapter_features",
            &self.adapter_features,
            self.num_classes() * self.num_domains(),
            manifest.dim,
        )?;
        if let Some(styles) = &self.style_features {
            if styles.rows() % self.num_classes() != 0 || styles.rows() < self.num_classes() {
                return Err(Error::Consistency {
                    what: "style_features".into(),
                    declared: format!("a multiple of {} rows", self.num_classes()),
                    stored: styles.shape_string(),
                });
            }
            check_shape("style_features", styles, styles.rows(), manifest.dim)?;
            if let Some(vectors) = &self.style_vectors {
                let m = styles.rows() / self.num_classes();
                if vectors.rows() != m {
                    return Err(Error::Consistency {
                        what: "style_vectors".into(),
                        declared: format!("{m} rows"),
                        stored: vectors.shape_string(),
                    });
                }
            }
        }
        if let Some(eval) = &self.eval {
            check_shape("eval_features", &eval.features, eval.labels.len(), manifest.dim)?;
        }
        Ok(())
    }
}

fn check_shape(what: &str, matrix: &FeatureMatrix, rows: usize, dim: usize) -> Result<()> {
    if matrix.rows() != rows || matrix.dim() != dim {
        return Err(Error::Consistency {
            what: what.into(),
            declared: format!("{rows}x{dim}"),
            stored: matrix.shape_string(),
        });
    }
    Ok(())
}

pub fn write_bundle(bundle: &FeatureBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = bundle.manifest();
    write_matrix(&bundle.content_features, dir.join(&manifest.content_features))?;
    write_matrix(&bundle.adapter_features, dir.join(&manifest.adapter_features))?;
    if let (Some(m), Some(f)) = (&bundle.style_features, &manifest.style_features) {
        write_matrix(m, dir.join(f))?;
    }
    if let (Some(m), Some(f)) = (&bundle.style_vectors, &manifest.style_vectors) {
        write_matrix(m, dir.join(f))?;
    }
    if let (Some(e), Some(f)) = (&bundle.eval, &manifest.eval_features) {
        write_matrix(&e.features, dir.join(f))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<FeatureBundle> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = parse_manifest(&bytes).map_err(|e| e.context(path.display().to_string()))?;

    let load = |file: &str| read_matrix(dir.join(file));
    let content_features = load(&manifest.content_features)?;
    let adapter_features = load(&manifest.adapter_features)?;
    let style_features = manifest.style_features.as_deref().map(load).transpose()?;
    let style_vectors = manifest.style_vectors.as_deref().map(load).transpose()?;
    let eval = match (&manifest.eval_features, &manifest.eval_labels) {
        (Some(file), Some(labels)) => Some(EvalBlock {
            features: load(file)?,
            labels: labels.clone(),
            domains: manifest.eval_domains.clone().zip(manifest.eval_domain_names.clone()),
        }),
        _ => None,
    };

    let n = manifest.class_names.len();
    check_shape("content_features", &content_features, n, manifest.dim)?;
    check_shape(
        "adapter_features",
        &adapter_features,
        n * manifest.domain_names.len(),
        manifest.dim,
    )?;
    if let (Some(styles), Some(m)) = (&style_features, manifest.num_styles) {
        check_shape("style_features", styles, m * n, manifest.dim)?;
    }
    if let (Some(vectors), Some(m)) = (&style_vectors, manifest.num_styles) {
        if vectors.rows() != m {
            return Err(Error::Consistency {
                what: "style_vectors".into(),
                declared: format!("{m} rows"),
                stored: vectors.shape_string(),
            });
        }
    }
    if let Some(e) = &eval {
        check_shape("eval_features", &e.features, e.labels.len(), manifest.dim)?;
    }

    Ok(FeatureBundle {
        class_names: manifest.class_names,
        domain_names: manifest.domain_names,
        content_features,
        adapter_features,
        style_features,
        style_vectors,
        eval,
    })
}
