//! Joint training of the linear classifier and the adapter keys.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{logits_on_tape, Model, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::numdiff::{Tape, Tensor};
use crate::resampler::{self, ClassStats};
use crate::rng;
use crate::stylegen::{positive, StyleBank};

/// When resampled features are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    #[default]
    Epoch,
    Iteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    pub lr_adapter: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sfr_enabled: bool,
    pub ta_enabled: bool,
    pub resample_cadence: Cadence,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr_classifier: 0.05,
            lr_adapter: 0.01,
            momentum: 0.9,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            sfr_enabled: true,
            ta_enabled: true,
            resample_cadence: Cadence::Epoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        positive("train.lr_classifier", self.lr_classifier)?;
        positive("train.lr_adapter", self.lr_adapter)?;
        positive("train.beta", self.beta)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("train.alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Residual ratio in effect; zero when the adapter is disabled.
    pub fn effective_alpha(&self) -> f64 {
        if self.ta_enabled {
            self.alpha
        } else {
            0.0
        }
    }
}

/// `base · 0.5 · (1 + cos(π t / T))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs at least one step".into()));
    }
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total_steps}")));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Velocity buffer for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub velocity: Tensor,
}

impl Momentum {
    pub fn for_param(param: &Tensor) -> Self {
        Self {
            velocity: Tensor::zeros(param.shape()),
        }
    }
}

/// `v ← m·v + g; p ← p − lr·v`.
pub fn sgd_step(name: &str, param: &mut Tensor, grad: &Tensor, state: &mut Momentum, lr: f64, momentum: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.velocity.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of {name} at index {i}"),
        });
    }
    let v = state.velocity.data_mut();
    for ((p, v), g) in param.data_mut().iter_mut().zip(v).zip(grad.data()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's examples.
    pub loss: f64,
    /// Accuracy on the original style features after the epoch.
    pub train_acc: f64,
    pub batches: usize,
    pub examples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub trace: Vec<EpochRecord>,
    /// Total resampled rows drawn during fit.
    pub resampled_rows: usize,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        crate::bench::csv_string(
            &["epoch", "loss", "train_acc", "batches", "examples"],
            self.trace.iter().map(|r| {
                vec![
                    r.epoch.to_string(),
                    r.loss.to_string(),
                    r.train_acc.to_string(),
                    r.batches.to_string(),
                    r.examples.to_string(),
                ]
            }),
        )
    }
}

/// Fraction of rows of `features` predicted as their label.
pub fn accuracy(model: &Model, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if features.rows() == 0 || features.rows() != labels.len() {
        return Err(Error::InvalidArgument("accuracy needs a non-empty labelled set".into()));
    }
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        if model.predict(features.row(i))? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    rng::derive_seed(seed, &[0x5b1f, epoch as u64])
}

fn batch_stream(seed: u64, epoch: usize, batch: usize) -> u64 {
    rng::derive_seed(seed, &[0x5f13, epoch as u64, batch as u64])
}

/// Trains `model` in place on the bank's style features, plus resampled
/// features when `sfr_enabled`. The model's `alpha`/`beta` are set from
/// `config`.
pub fn fit(bank: &StyleBank, model: &mut Model, config: &TrainConfig, seed: u64) -> Result<FitReport> {
    config.validate()?;
    let (n, d) = (bank.num_classes(), bank.dim());
    if model.classifier.num_classes() != n || model.adapter.num_classes() != n {
        return Err(Error::shape("fit", format!("{n} classes"), format!("{} classes", model.classifier.num_classes())));
    }
    if model.classifier.dim() != d || model.adapter.dim() != d {
        return Err(Error::shape("fit", format!("[{d}]"), format!("[{}]", model.classifier.dim())));
    }
    model.adapter.alpha = config.effective_alpha();
    model.adapter.beta = config.beta;

    let originals = bank.features();
    let original_labels = bank.labels();
    let base = originals.rows();
    let stats: Vec<ClassStats> = if config.sfr_enabled {
        resampler::bank_stats(bank)?
    } else {
        Vec::new()
    };
    let per_epoch = if config.sfr_enabled { 2 * base } else { base };
    let batches_per_epoch = per_epoch.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let value_labels = model.adapter.label_matrix();
    let train_keys = config.ta_enabled && model.adapter.alpha != 0.0;

    let mut w_state = Momentum::for_param(model.classifier.weights());
    let mut f_state = Momentum::for_param(model.adapter.keys());
    let mut report = FitReport::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let (mut rows, mut labels): (Vec<Vec<f64>>, Vec<usize>) =
            (0..base).map(|i| (originals.row(i).to_vec(), original_labels[i])).unzip();
        if config.sfr_enabled {
            let (extra, extra_labels) = match config.resample_cadence {
                Cadence::Epoch => resampler::resample_classes(&stats, bank.num_styles(), resampler::epoch_stream(seed, epoch))?,
                // Placeholders with the right labels; redrawn per batch below.
                Cadence::Iteration => (originals.clone(), original_labels.clone()),
            };
            if config.resample_cadence == Cadence::Epoch {
                report.resampled_rows += extra.rows();
            }
            rows.extend((0..extra.rows()).map(|i| extra.row(i).to_vec()));
            labels.extend(extra_labels);
        }

        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng::seeded(shuffle_seed(seed, epoch)));

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            if config.sfr_enabled && config.resample_cadence == Cadence::Iteration {
                let stream = batch_stream(seed, epoch, b);
                let mut gens: Vec<_> = (0..n).map(|j| resampler::class_stream(stream, j)).collect();
                for (slot, &i) in chunk.iter().enumerate() {
                    if i >= base {
                        batch_rows[slot] = resampler::draw_unit(&stats[labels[i]], &mut gens[labels[i]])?;
                        report.resampled_rows += 1;
                    }
                }
            }

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&batch_rows)?);
            let w = tape.named_leaf("W", model.classifier.weights().clone());
            let f = if train_keys {
                tape.named_leaf("F", model.adapter.keys().clone())
            } else {
                tape.named_constant("F", model.adapter.keys().clone())
            };
            let l = tape.constant(value_labels.clone());
            let logits = logits_on_tape(&mut tape, x, w, f, l, model.adapter.alpha, model.adapter.beta)?;
            let loss = tape.log_softmax_cross_entropy(logits, &targets)?;
            let loss_value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {b}"),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            let grads = tape.backward(loss)?;

            let ctx = |e: Error| e.context(format!("epoch {epoch}, batch {b}"));
            let lr_w = cosine_lr(config.lr_classifier, step, total_steps)?;
            sgd_step("W", model.classifier.weights_mut(), &grads.wrt(w), &mut w_state, lr_w, config.momentum).map_err(ctx)?;
            if train_keys {
                let lr_f = cosine_lr(config.lr_adapter, step, total_steps)?;
                sgd_step("F", model.adapter.keys_mut(), &grads.wrt(f), &mut f_state, lr_f, config.momentum).map_err(ctx)?;
                model.adapter.renormalize_keys().map_err(ctx)?;
            }
            step += 1;
        }

        report.trace.push(EpochRecord {
            epoch,
            loss: loss_sum / rows.len() as f64,
            train_acc: accuracy(model, originals, &original_labels)?,
            batches: batches_per_epoch,
            examples: rows.len(),
        });
    }
    Ok(report)
}
