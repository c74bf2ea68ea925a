//! Text encoders mapping prompt templates to unit-norm features.
//!
//! [`ToyEncoder`] is a deterministic stand-in for a pretrained text tower:
//! `normalize(A · mean(token embeddings))`, differentiable with respect to the
//! style slot. [`FileEncoder`] serves features exported into a bundle.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::featio::{FeatureBundle, UNIT_NORM_TOLERANCE};
use crate::numdiff::{Shape, Tape, Tensor, Var};
use crate::rng::{fnv1a64, SplitMix64, GOLDEN_GAMMA};

pub const STYLE_SLOT: &str = "[STYLE]";
pub const CLASS_SLOT: &str = "[CLS]";
pub const DOMAIN_SLOT: &str = "[DOM]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateToken {
    Word(String),
    Style,
    Class,
    Domain,
}

/// A prompt with optional style, class and domain slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    tokens: Vec<TemplateToken>,
}

impl PromptTemplate {
    /// Parses a whitespace-separated template. `[STYLE]`, `[CLS]` and `[DOM]`
    /// mark slots; at most one style slot is allowed.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<TemplateToken> = text
            .split_whitespace()
            .map(|t| match t {
                STYLE_SLOT => TemplateToken::Style,
                CLASS_SLOT => TemplateToken::Class,
                DOMAIN_SLOT => TemplateToken::Domain,
                w => TemplateToken::Word(w.to_lowercase()),
            })
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty prompt template".into()));
        }
        if tokens.iter().filter(|t| **t == TemplateToken::Style).count() > 1 {
            return Err(Error::InvalidArgument(format!("template {text:?} has more than one style slot")));
        }
        Ok(Self { tokens })
    }

    /// "a [STYLE] style of a [CLS]": one style feature per (style, class).
    pub fn styled_class() -> Self {
        Self::parse("a [STYLE] style of a [CLS]").expect("static template")
    }

    /// "a [STYLE] style of a": the style-only prompt.
    pub fn style_only() -> Self {
        Self::parse("a [STYLE] style of a").expect("static template")
    }

    /// "[CLS]": the bare class name.
    pub fn class_only() -> Self {
        Self::parse("[CLS]").expect("static template")
    }

    /// "a [DOM] of a [CLS]": adapter initialization prompts.
    pub fn domain_class() -> Self {
        Self::parse("a [DOM] of a [CLS]").expect("static template")
    }

    pub fn has_style(&self) -> bool {
        self.tokens.contains(&TemplateToken::Style)
    }

    /// Lowercased whitespace tokens with slots bound. The style slot stays a
    /// marker since it has no surface form.
    pub fn pieces(&self, prompt: &Prompt<'_>) -> Result<Vec<Piece>> {
        let mut out = Vec::new();
        for token in &self.tokens {
            match token {
                TemplateToken::Word(w) => out.push(Piece::Word(w.clone())),
                TemplateToken::Style => {
                    if prompt.style.is_none() {
                        return Err(Error::UnboundSlot(STYLE_SLOT));
                    }
                    out.push(Piece::Style);
                }
                TemplateToken::Class => {
                    let name = prompt.class.ok_or(Error::UnboundSlot(CLASS_SLOT))?;
                    out.extend(words(name));
                }
                TemplateToken::Domain => {
                    let name = prompt.domain.ok_or(Error::UnboundSlot(DOMAIN_SLOT))?;
                    out.extend(words(name));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("prompt renders to no tokens".into()));
        }
        Ok(out)
    }

    /// The rendered prompt string, with the style slot written as `[STYLE]`.
    pub fn render(&self, prompt: &Prompt<'_>) -> Result<String> {
        let pieces = self.pieces(prompt)?;
        Ok(pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Style => STYLE_SLOT,
            })
            .collect::<Vec<_>>()
            .join(" "))
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Word(w) => w.as_str(),
                TemplateToken::Style => STYLE_SLOT,
                TemplateToken::Class => CLASS_SLOT,
                TemplateToken::Domain => DOMAIN_SLOT,
            })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

fn words(name: &str) -> impl Iterator<Item = Piece> + '_ {
    name.split_whitespace().map(|w| Piece::Word(w.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Style,
}

/// Slot bindings for one encode call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Prompt<'a> {
    pub style: Option<&'a [f64]>,
    pub class: Option<&'a str>,
    pub domain: Option<&'a str>,
}

impl<'a> Prompt<'a> {
    pub fn class(class: &'a str) -> Self {
        Self {
            class: Some(class),
            ..Self::default()
        }
    }

    pub fn domain_class(domain: &'a str, class: &'a str) -> Self {
        Self {
            class: Some(class),
            domain: Some(domain),
            ..Self::default()
        }
    }

    pub fn styled(style: &'a [f64], class: Option<&'a str>) -> Self {
        Self {
            style: Some(style),
            class,
            domain: None,
        }
    }
}

/// Anything that maps a bound template to a unit-norm feature.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    fn encode(&self, template: &PromptTemplate, prompt: &Prompt<'_>) -> Result<Vec<f64>>;
}

/// Deterministic embedding of one token: FNV-1a of the bytes, XORed with the
/// seed, drives a splitmix64 stream mapped to `[-1, 1)`.
pub fn token_embedding(token: &str, seed: u64, token_dim: usize) -> Vec<f64> {
    let mut stream = SplitMix64::new(fnv1a64(token.as_bytes()) ^ seed);
    (0..token_dim).map(|_| stream.next_signed_unit()).collect()
}

/// The frozen `feature_dim × token_dim` projection, scaled by `1/sqrt(token_dim)`.
pub fn projection_matrix(seed: u64, token_dim: usize, feature_dim: usize) -> Tensor {
    let mut stream = SplitMix64::new(seed ^ GOLDEN_GAMMA);
    let scale = 1.0 / (token_dim as f64).sqrt();
    let data = (0..feature_dim * token_dim)
        .map(|_| stream.next_signed_unit() * scale)
        .collect();
    Tensor::matrix(feature_dim, token_dim, data).expect("finite by construction")
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    seed: u64,
    token_dim: usize,
    feature_dim: usize,
    projection: Tensor,
}

impl ToyEncoder {
    pub fn new(seed: u64, token_dim: usize, feature_dim: usize) -> Result<Self> {
        if token_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder dims must be positive (token_dim {token_dim}, feature_dim {feature_dim})"
            )));
        }
        Ok(Self {
            seed,
            token_dim,
            feature_dim,
            projection: projection_matrix(seed, token_dim, feature_dim),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        token_embedding(token, self.seed, self.token_dim)
    }

    /// Encodes on `tape`. `style` must be a `token_dim` vector node when the
    /// template has a style slot; it enters the token mean directly.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        template: &PromptTemplate,
        style: Option<Var>,
        class: Option<&str>,
        domain: Option<&str>,
    ) -> Result<Var> {
        let placeholder = [0.0];
        let binding = Prompt {
            style: style.map(|_| &placeholder[..]),
            class,
            domain,
        };
        let pieces = template.pieces(&binding)?;
        let mut rows = Vec::with_capacity(pieces.len());
        for piece in &pieces {
            match piece {
                Piece::Word(w) => {
                    let e = Tensor::vector(self.embed(w))?;
                    rows.push(tape.constant(e));
                }
                Piece::Style => {
                    let s = style.expect("bound above");
                    let shape = tape.value(s).shape();
                    if shape != Shape::Vector(self.token_dim) {
                        return Err(Error::shape("encode", shape, Shape::Vector(self.token_dim)));
                    }
                    rows.push(s);
                }
            }
        }
        let tokens = tape.stack_rows(&rows)?;
        let mean = tape.mean_rows(tokens)?;
        let a = tape.constant(self.projection.clone());
        let projected = tape.matvec(a, mean)?;
        tape.l2_normalize(projected)
    }
}

impl TextEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, template: &PromptTemplate, prompt: &Prompt<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let style = match prompt.style {
            Some(s) => Some(tape.constant(Tensor::vector(s.to_vec())?)),
            None => None,
        };
        let out = self.encode_on_tape(&mut tape, template, style, prompt.class, prompt.domain)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Serves features stored in a bundle, keyed by rendered prompt.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEncoder {
    /// Indexes content rows under `[CLS]` and adapter rows under
    /// `a [DOM] of a [CLS]`.
    pub fn from_bundle(bundle: &FeatureBundle) -> Result<Self> {
        bundle.content_features.check_unit_rows()?;
        bundle.adapter_features.check_unit_rows()?;
        let mut table = HashMap::new();
        let class_t = PromptTemplate::class_only();
        let dom_t = PromptTemplate::domain_class();
        for (j, class) in bundle.class_names.iter().enumerate() {
            let key = class_t.render(&Prompt::class(class))?;
            table.insert(key, bundle.content_features.row(j).to_vec());
            for (k, domain) in bundle.domain_names.iter().enumerate() {
                let key = dom_t.render(&Prompt::domain_class(domain, class))?;
                table.insert(key, bundle.adapter_features.row(bundle.adapter_row(j, k)).to_vec());
            }
        }
        Ok(Self {
            dim: bundle.dim(),
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, template: &PromptTemplate, prompt: &Prompt<'_>) -> Result<Vec<f64>> {
        if template.has_style() {
            return Err(Error::InvalidArgument(
                "file encoder cannot encode a learnable style slot".into(),
            ));
        }
        let key = template.render(prompt)?;
        let row = self.table.get(&key).ok_or(Error::MissingPrompt(key))?;
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        debug_assert!((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        Ok(row.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::FeatureMatrix;
    use crate::numdiff::gradcheck;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn token_embedding_is_deterministic_and_bounded() {
        let a = token_embedding("dog", 5, 16);
        assert_eq!(a, token_embedding("dog", 5, 16));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        assert_ne!(token_embedding("dog", 1, 16), token_embedding("dog", 2, 16));
    }

    #[test]
    fn projection_is_deterministic_and_scaled() {
        let a = projection_matrix(9, 16, 32);
        assert_eq!(a, projection_matrix(9, 16, 32));
        let bound = 1.0 / 4.0;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        let single = projection_matrix(3, 1, 1);
        assert!((-1.0..1.0).contains(&single.data()[0]));
    }

    #[test]
    fn templates_render_lowercased() {
        let t = PromptTemplate::domain_class();
        assert_eq!(t.render(&Prompt::domain_class("Photo", "Golf Ball")).unwrap(), "a photo of a golf ball");
        assert_eq!(PromptTemplate::styled_class().to_string(), "a [STYLE] style of a [CLS]");
        assert!(PromptTemplate::parse("[STYLE] [STYLE]").is_err());
    }

    #[test]
    fn unbound_slot_is_an_error() {
        let enc = ToyEncoder::new(0, 8, 8).unwrap();
        let err = enc.encode(&PromptTemplate::class_only(), &Prompt::default()).unwrap_err();
        assert!(matches!(err, Error::UnboundSlot(CLASS_SLOT)));
        let err = enc.encode(&PromptTemplate::style_only(), &Prompt::default()).unwrap_err();
        assert!(matches!(err, Error::UnboundSlot(STYLE_SLOT)));
    }

    #[test]
    fn toy_outputs_are_unit_norm() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let f = enc.encode(&PromptTemplate::class_only(), &Prompt::class("dog")).unwrap();
        assert!((norm(&f) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn classes_differ_under_same_style() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let style = vec![0.1; 16];
        let t = PromptTemplate::styled_class();
        let a = enc.encode(&t, &Prompt::styled(&style, Some("dog"))).unwrap();
        let b = enc.encode(&t, &Prompt::styled(&style, Some("elephant"))).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn style_gradient_passes_gradcheck() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let target = enc.encode(&PromptTemplate::class_only(), &Prompt::class("horse")).unwrap();
        let mut g = crate::rng::gaussian(11);
        for _ in 0..5 {
            let s: Vec<f64> = (0..16).map(|_| g.normal(0.0, 0.3)).collect();
            let err = gradcheck(
                |tape, x| {
                    let f = enc.encode_on_tape(tape, &PromptTemplate::style_only(), Some(x), None, None)?;
                    let c = tape.constant(Tensor::vector(target.clone())?);
                    tape.cosine_similarity(f, c)
                },
                &Tensor::vector(s).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn wrong_style_length_is_rejected() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let s = vec![0.0; 3];
        assert!(enc
            .encode(&PromptTemplate::style_only(), &Prompt::styled(&s, None))
            .is_err());
    }

    #[test]
    fn file_encoder_looks_up_and_reports_misses() {
        let toy = ToyEncoder::new(4, 8, 6).unwrap();
        let classes = ["dog".to_string(), "house".to_string()];
        let domains = ["photo".to_string(), "sketch".to_string()];
        let content: Vec<Vec<f64>> = classes
            .iter()
            .map(|c| toy.encode(&PromptTemplate::class_only(), &Prompt::class(c)).unwrap())
            .collect();
        let adapter: Vec<Vec<f64>> = classes
            .iter()
            .flat_map(|c| domains.iter().map(move |d| (c, d)))
            .map(|(c, d)| toy.encode(&PromptTemplate::domain_class(), &Prompt::domain_class(d, c)).unwrap())
            .collect();
        let bundle = FeatureBundle {
            class_names: classes.to_vec(),
            domain_names: domains.to_vec(),
            content_features: FeatureMatrix::from_rows(&content).unwrap(),
            adapter_features: FeatureMatrix::from_rows(&adapter).unwrap(),
            style_features: None,
            style_vectors: None,
            eval: None,
        };
        let file = FileEncoder::from_bundle(&bundle).unwrap();
        assert_eq!(file.len(), 6);
        let got = file
            .encode(&PromptTemplate::domain_class(), &Prompt::domain_class("sketch", "house"))
            .unwrap();
        assert_eq!(got, adapter[3]);
        let err = file
            .encode(&PromptTemplate::domain_class(), &Prompt::domain_class("cartoon", "dog"))
            .unwrap_err();
        assert!(err.to_string().contains("a cartoon of a dog"), "{err}");
    }
}
