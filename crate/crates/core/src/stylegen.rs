//! Sequential learning of style word vectors.
//!
//! Style `i` is initialized from a small Gaussian and trained against two
//! objectives before it is frozen:
//!
//! * diversity: the mean absolute cosine between its style-only prompt
//!   feature and those of every earlier style;
//! * content consistency: softmax cross-entropy that keeps each styled class
//!   prompt closest to its own bare class-name feature.
//!
//! Both are isolated in [`style_term`] and [`content_term`] so alternative
//! forms can be swapped in.

use serde::{Deserialize, Serialize};

use crate::encoder::{Prompt, PromptTemplate, TextEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::numdiff::{Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleGenConfig {
    /// Number of style word vectors `M`.
    pub num_styles: usize,
    pub init_std: f64,
    /// Optimizer steps per style vector.
    pub iterations: usize,
    pub step_size: f64,
    pub momentum: f64,
}

impl Default for StyleGenConfig {
    fn default() -> Self {
        Self {
            num_styles: 80,
            init_std: 0.02,
            iterations: 100,
            step_size: 0.12,
            momentum: 0.9,
        }
    }
}

impl StyleGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_styles == 0 {
            return Err(Error::config("stylegen.num_styles", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("stylegen.iterations", "must be at least 1"));
        }
        positive("stylegen.init_std", self.init_std)?;
        positive("stylegen.step_size", self.step_size)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("stylegen.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub(crate) fn positive(field: &str, value: f64) -> Result<()> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::config(field, format!("must be positive and finite, got {value}")));
    }
    Ok(())
}

/// Frozen style word vectors and their style features.
///
/// Feature row `i·N + j` is the encoding of "a [STYLE] style of a [CLS]" with
/// style `i` and class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    class_names: Vec<String>,
    vectors: Vec<Vec<f64>>,
    features: Tensor,
}

impl StyleBank {
    /// Assembles a bank from stored parts. `vectors` may be empty when only
    /// the features were exported.
    pub fn from_parts(class_names: Vec<String>, vectors: Vec<Vec<f64>>, features: Tensor) -> Result<Self> {
        let n = class_names.len();
        let rows = features.rows();
        if n == 0 || rows == 0 || !rows.is_multiple_of(n) {
            return Err(Error::Consistency {
                what: "style bank".into(),
                declared: format!("a multiple of {n} rows"),
                stored: features.shape().to_string(),
            });
        }
        if !vectors.is_empty() && vectors.len() != rows / n {
            return Err(Error::Consistency {
                what: "style vectors".into(),
                declared: format!("{} vectors", rows / n),
                stored: format!("{} vectors", vectors.len()),
            });
        }
        Ok(Self {
            class_names,
            vectors,
            features,
        })
    }

    pub fn num_styles(&self) -> usize {
        self.features.rows() / self.class_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// All `M·N` style features.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, style: usize, class: usize) -> &[f64] {
        self.features.row(style * self.num_classes() + class)
    }

    /// Class label of every feature row.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.features.rows()).map(|r| r % self.num_classes()).collect()
    }

    /// The `M` style features of one class.
    pub fn class_rows(&self, class: usize) -> Vec<&[f64]> {
        (0..self.num_styles()).map(|i| self.feature(i, class)).collect()
    }
}

/// Bare class-name features, one row per class.
pub fn content_features(encoder: &dyn TextEncoder, class_names: &[String]) -> Result<Tensor> {
    let template = PromptTemplate::class_only();
    let rows = class_names
        .iter()
        .map(|c| encoder.encode(&template, &Prompt::class(c)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Mean absolute cosine between the style-only feature of `style` and each
/// of `previous`. `None` when there are no previous styles.
pub fn style_term(
    tape: &mut Tape,
    encoder: &ToyEncoder,
    style: Var,
    previous: &[Vec<f64>],
) -> Result<Option<Var>> {
    if previous.is_empty() {
        return Ok(None);
    }
    let feature = encoder.encode_on_tape(tape, &PromptTemplate::style_only(), Some(style), None, None)?;
    let mut total: Option<Var> = None;
    for prev in previous {
        let p = tape.constant(Tensor::vector(prev.clone())?);
        let cos = tape.cosine_similarity(feature, p)?;
        let term = tape.abs(cos)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("previous is non-empty");
    tape.scale(total, 1.0 / previous.len() as f64).map(Some)
}

/// Mean over classes of the cross-entropy of cosine similarities between
/// each styled class prompt and all bare class prompts.
pub fn content_term(
    tape: &mut Tape,
    encoder: &ToyEncoder,
    style: Var,
    content: &Tensor,
    class_names: &[String],
) -> Result<Var> {
    if class_names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "content consistency needs at least two classes, got {}",
            class_names.len()
        )));
    }
    let template = PromptTemplate::styled_class();
    let rows = class_names
        .iter()
        .map(|c| encoder.encode_on_tape(tape, &template, Some(style), Some(c), None))
        .collect::<Result<Vec<_>>>()?;
    let styled = tape.stack_rows(&rows)?;
    let anchors = tape.constant(content.transposed());
    let similarity = tape.matmul(styled, anchors)?;
    let targets: Vec<usize> = (0..class_names.len()).collect();
    tape.log_softmax_cross_entropy(similarity, &targets)
}

fn style_only_feature(encoder: &ToyEncoder, style: &[f64]) -> Result<Vec<f64>> {
    encoder.encode(&PromptTemplate::style_only(), &Prompt::styled(style, None))
}

/// Diversity loss of style `index` (0-based) against styles `0..index`.
/// Zero for the first style.
pub fn style_diversity_loss(index: usize, vectors: &[Vec<f64>], encoder: &ToyEncoder) -> Result<f64> {
    let previous = vectors[..index]
        .iter()
        .map(|s| style_only_feature(encoder, s))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(vectors[index].clone())?);
    Ok(match style_term(&mut tape, encoder, s, &previous)? {
        Some(v) => tape.value(v).data()[0],
        None => 0.0,
    })
}

pub fn content_consistency_loss(
    index: usize,
    vectors: &[Vec<f64>],
    encoder: &ToyEncoder,
    class_names: &[String],
) -> Result<f64> {
    let content = content_features(encoder, class_names)?;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(vectors[index].clone())?);
    let v = content_term(&mut tape, encoder, s, &content, class_names)?;
    Ok(tape.value(v).data()[0])
}

/// Per-style loss values recorded before every optimizer step.
pub type LossTrace = Vec<Vec<f64>>;

pub fn train_styles(
    config: &StyleGenConfig,
    encoder: &ToyEncoder,
    class_names: &[String],
    seed: u64,
) -> Result<StyleBank> {
    train_styles_traced(config, encoder, class_names, seed).map(|(bank, _)| bank)
}

/// Trains styles one at a time, freezing each before the next starts.
pub fn train_styles_traced(
    config: &StyleGenConfig,
    encoder: &ToyEncoder,
    class_names: &[String],
    seed: u64,
) -> Result<(StyleBank, LossTrace)> {
    config.validate()?;
    let content = content_features(encoder, class_names)?;
    let mut init = rng::gaussian(rng::derive_seed(seed, &[0x5717]));
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(config.num_styles);
    let mut frozen_dom: Vec<Vec<f64>> = Vec::with_capacity(config.num_styles);
    let mut trace = Vec::with_capacity(config.num_styles);

    for i in 0..config.num_styles {
        let mut style: Vec<f64> = (0..encoder.token_dim())
            .map(|_| init.normal(0.0, config.init_std))
            .collect();
        let mut velocity = vec![0.0; style.len()];
        let mut losses = Vec::with_capacity(config.iterations);

        for t in 0..config.iterations {
            let at = |e: Error| e.context(format!("style {i}, iteration {t}"));
            let mut tape = Tape::new();
            let s = tape.named_leaf(&format!("style_{i}"), Tensor::vector(style.clone()).map_err(at)?);
            let content_loss = content_term(&mut tape, encoder, s, &content, class_names).map_err(at)?;
            let loss = match style_term(&mut tape, encoder, s, &frozen_dom).map_err(at)? {
                Some(style_loss) => tape.add(style_loss, content_loss).map_err(at)?,
                None => content_loss,
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(at(Error::NonFinite { context: "style loss".into() }));
            }
            losses.push(value);
            let grad = tape.backward(loss).map_err(at)?.wrt(s);
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(at(Error::NonFinite { context: "style gradient".into() }));
            }
            for ((p, v), g) in style.iter_mut().zip(&mut velocity).zip(grad.data()) {
                *v = config.momentum * *v + g;
                *p -= config.step_size * *v;
            }
        }

        frozen_dom.push(style_only_feature(encoder, &style)?);
        vectors.push(style);
        trace.push(losses);
    }

    let template = PromptTemplate::styled_class();
    let mut rows = Vec::with_capacity(config.num_styles * class_names.len());
    for s in &vectors {
        for class in class_names {
            rows.push(encoder.encode(&template, &Prompt::styled(s, Some(class)))?);
        }
    }
    let bank = StyleBank::from_parts(class_names.to_vec(), vectors, Tensor::from_rows(&rows)?)?;
    Ok((bank, trace))
}

/// Mean pairwise absolute cosine between style-only features.
pub fn mean_pairwise_style_similarity(vectors: &[Vec<f64>], encoder: &ToyEncoder) -> Result<f64> {
    let feats = vectors
        .iter()
        .map(|s| style_only_feature(encoder, s))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..feats.len() {
        for b in a + 1..feats.len() {
            total += crate::numdiff::dot_raw(&feats[a], &feats[b]).abs();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}
