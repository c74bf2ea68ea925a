//! Synthetic domain-shift benchmark and the experiment harness built on it:
//! the SFR × TA ablation, random vs template key initialization, and the
//! α/β sensitivity sweep.
//!
//! Synthetic "image" features live in the toy text space. A sample of class
//! `j` in unseen domain `g` is `normalize(T(P_j) + d_g + ε)` with a shared
//! per-domain shift `d_g ~ N(0, σ_d² I)` and per-sample noise
//! `ε ~ N(0, σ_n² I)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{init_from_templates, init_random, LinearClassifier, Model, TextAdapter};
use crate::config::{KeyInit, RunConfig};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::featio::{EvalBlock, FeatureMatrix};
use crate::numdiff::{dot_raw, Tensor, MIN_NORM};
use crate::rng;
use crate::stylegen::{content_features, train_styles, StyleBank};
use crate::trainer::{fit, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Unseen domains `G`.
    pub num_domains: usize,
    /// Samples per (class, domain) `Q`.
    pub samples_per_domain: usize,
    /// `σ_d`.
    pub shift_scale: f64,
    /// `σ_n`.
    pub noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_domains: 4,
            samples_per_domain: 50,
            shift_scale: 0.4,
            noise_scale: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("synth.num_domains", "must be at least 1"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::config("synth.samples_per_domain", "must be at least 1"));
        }
        for (field, v) in [("synth.shift_scale", self.shift_scale), ("synth.noise_scale", self.noise_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Labelled features grouped by domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub domain_names: Vec<String>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_block(&self) -> Result<EvalBlock> {
        Ok(EvalBlock {
            features: FeatureMatrix::from_tensor(&self.features)?.with_unit_norm()?,
            labels: self.labels.clone(),
            domains: Some((self.domains.clone(), self.domain_names.clone())),
        })
    }

    /// Without per-sample domains everything lands in one domain, `all`.
    pub fn from_block(block: &EvalBlock) -> Result<Self> {
        let (domains, domain_names) = match &block.domains {
            Some((d, names)) => (d.clone(), names.clone()),
            None => (vec![0; block.labels.len()], vec!["all".to_string()]),
        };
        Ok(Self {
            features: block.features.to_tensor(),
            labels: block.labels.clone(),
            domains,
            domain_names,
        })
    }
}

fn domain_stream(seed: u64, domain: usize) -> u64 {
    rng::derive_seed(seed, &[0x5e7d, domain as u64])
}

/// `G·N·Q` samples ordered domain, then class, then sample.
pub fn generate_synth(encoder: &ToyEncoder, class_names: &[String], config: &SynthConfig, seed: u64) -> Result<EvalSet> {
    config.validate()?;
    let content = content_features(encoder, class_names)?;
    let dim = content.cols();
    let (g_count, q) = (config.num_domains, config.samples_per_domain);
    let mut rows = Vec::with_capacity(g_count * class_names.len() * q);
    let (mut labels, mut domains) = (Vec::new(), Vec::new());
    for g in 0..g_count {
        let mut gauss = rng::gaussian(domain_stream(seed, g));
        let shift: Vec<f64> = (0..dim).map(|_| gauss.normal(0.0, config.shift_scale)).collect();
        for j in 0..class_names.len() {
            let base: Vec<f64> = content.row(j).iter().zip(&shift).map(|(c, s)| c + s).collect();
            for _ in 0..q {
                let mut sample = None;
                for _ in 0..2 {
                    let x: Vec<f64> = base.iter().map(|&b| gauss.normal(b, config.noise_scale)).collect();
                    let norm = dot_raw(&x, &x).sqrt();
                    if norm > MIN_NORM {
                        sample = Some(x.into_iter().map(|v| v / norm).collect::<Vec<_>>());
                        break;
                    }
                }
                rows.push(sample.ok_or_else(|| Error::ZeroNorm {
                    tensor: format!("synthetic sample (domain {g}, class {j})"),
                    norm: 0.0,
                })?);
                labels.push(j);
                domains.push(g);
            }
        }
    }
    Ok(EvalSet {
        features: Tensor::from_rows(&rows)?,
        labels,
        domains,
        domain_names: (0..g_count).map(|g| format!("unseen-{g}")).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain: Vec<DomainAccuracy>,
    /// Arithmetic mean of the per-domain accuracies.
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub seeds: Vec<u64>,
    pub config: Value,
}

/// Top-1 accuracy per domain and overall. Domains without samples are
/// skipped.
pub fn evaluate(model: &Model, set: &EvalSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let k = set.domain_names.len();
    let (mut hits, mut counts) = (vec![0usize; k], vec![0usize; k]);
    for i in 0..set.len() {
        let g = set.domains[i];
        if g >= k {
            return Err(Error::Data(format!("sample {i} has domain {g} of {k}")));
        }
        counts[g] += 1;
        if model.predict(set.features.row(i))? == set.labels[i] {
            hits[g] += 1;
        }
    }
    let per_domain: Vec<DomainAccuracy> = (0..k)
        .filter(|&g| counts[g] > 0)
        .map(|g| DomainAccuracy {
            domain: set.domain_names[g].clone(),
            accuracy: hits[g] as f64 / counts[g] as f64,
            samples: counts[g],
        })
        .collect();
    let mean_accuracy = per_domain.iter().map(|d| d.accuracy).sum::<f64>() / per_domain.len() as f64;
    Ok(EvalReport {
        per_domain,
        mean_accuracy,
        overall_accuracy: hits.iter().sum::<usize>() as f64 / set.len() as f64,
        seeds: Vec::new(),
        config: Value::Null,
    })
}

pub fn toy_encoder(config: &RunConfig, seed: u64) -> Result<ToyEncoder> {
    ToyEncoder::new(seed, config.encoder.token_dim, config.encoder.feature_dim)
}

/// Untrained model: zero classifier, keys initialized per `init`.
pub fn initial_model(config: &RunConfig, encoder: &ToyEncoder, init: KeyInit, seed: u64) -> Result<Model> {
    let (n, k, d) = (config.classes.len(), config.adapter.domains.len(), config.encoder.feature_dim);
    let keys = match init {
        KeyInit::Template => init_from_templates(encoder, &config.classes, &config.adapter.domains)?,
        KeyInit::Random => init_random(n, k, d, seed)?,
    };
    Ok(Model {
        classifier: LinearClassifier::zeros(n, d),
        adapter: TextAdapter::new(keys, n, config.adapter.domains.clone(), config.train.alpha, config.train.beta)?,
    })
}

/// Everything a seed's trials share: encoder, frozen bank, unseen domains.
pub struct SeedSetup {
    pub seed: u64,
    pub encoder: ToyEncoder,
    pub bank: StyleBank,
    pub eval: EvalSet,
}

pub fn prepare(config: &RunConfig, seed: u64) -> Result<SeedSetup> {
    let encoder = toy_encoder(config, seed)?;
    let bank = train_styles(&config.stylegen, &encoder, &config.classes, seed)?;
    let eval = generate_synth(&encoder, &config.classes, &config.synth, seed)?;
    Ok(SeedSetup {
        seed,
        encoder,
        bank,
        eval,
    })
}

/// Trains one model from `setup` and returns its mean unseen-domain accuracy.
pub fn run_trial(config: &RunConfig, setup: &SeedSetup, train: &TrainConfig, init: KeyInit) -> Result<f64> {
    let mut model = initial_model(config, &setup.encoder, init, setup.seed)?;
    fit(&setup.bank, &mut model, train, setup.seed)?;
    Ok(evaluate(&model, &setup.eval)?.mean_accuracy)
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub summary: Summary,
}

/// RFC 4180 CSV with a header row. Numbers use Rust's shortest round-trip
/// formatting.
pub(crate) fn csv_string<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for row in rows {
        w.write_record(&row).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 fields")
}

pub fn table_csv(key: &str, rows: &[TableRow]) -> String {
    csv_string(
        &[key, "mean_acc", "std_acc"],
        rows.iter()
            .map(|r| vec![r.label.clone(), r.summary.mean.to_string(), r.summary.std.to_string()]),
    )
}

fn prepare_all(config: &RunConfig, min_seeds: usize) -> Result<Vec<SeedSetup>> {
    if config.bench.seeds.len() < min_seeds {
        return Err(Error::config(
            "bench.seeds",
            format!("needs at least {min_seeds} seeds, got {}", config.bench.seeds.len()),
        ));
    }
    config.bench.seeds.par_iter().map(|&s| prepare(config, s)).collect()
}

/// Trains every (job, seed) pair and summarizes each job across seeds.
fn run_grid(config: &RunConfig, setups: &[SeedSetup], jobs: &[(TrainConfig, KeyInit)]) -> Result<Vec<Summary>> {
    let pairs: Vec<(usize, usize)> = (0..jobs.len()).flat_map(|j| (0..setups.len()).map(move |s| (j, s))).collect();
    let scores = pairs
        .par_iter()
        .map(|&(j, s)| run_trial(config, &setups[s], &jobs[j].0, jobs[j].1))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.chunks(setups.len()).map(|c| Summary::of(c.to_vec())).collect())
}

pub const ABLATION_LABELS: [&str; 4] = ["(−,−)", "(SFR,−)", "(−,TA)", "(SFR,TA)"];

/// The four SFR × TA cells, each trained from the same frozen bank per seed.
pub fn run_ablation(config: &RunConfig) -> Result<Vec<TableRow>> {
    let setups = prepare_all(config, 3)?;
    let jobs: Vec<(TrainConfig, KeyInit)> = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(sfr, ta)| {
            let train = TrainConfig {
                sfr_enabled: sfr,
                ta_enabled: ta,
                ..config.train.clone()
            };
            (train, config.adapter.init)
        })
        .collect();
    let summaries = run_grid(config, &setups, &jobs)?;
    Ok(ABLATION_LABELS
        .iter()
        .zip(summaries)
        .map(|(label, summary)| TableRow {
            label: label.to_string(),
            summary,
        })
        .collect())
}

/// Random vs template key initialization with the adapter enabled.
pub fn run_init_comparison(config: &RunConfig) -> Result<Vec<TableRow>> {
    let setups = prepare_all(config, 3)?;
    let train = TrainConfig {
        ta_enabled: true,
        ..config.train.clone()
    };
    let jobs = vec![(train.clone(), KeyInit::Random), (train, KeyInit::Template)];
    let summaries = run_grid(config, &setups, &jobs)?;
    Ok(["Random", "Template"]
        .iter()
        .zip(summaries)
        .map(|(label, summary)| TableRow {
            label: label.to_string(),
            summary,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub summary: Summary,
}

/// One trained model per (α, β, seed), α-major.
pub fn sweep_alpha_beta(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let setups = prepare_all(config, 1)?;
    let grid: Vec<(f64, f64)> = config
        .bench
        .alphas
        .iter()
        .flat_map(|&a| config.bench.betas.iter().map(move |&b| (a, b)))
        .collect();
    let jobs: Vec<(TrainConfig, KeyInit)> = grid
        .iter()
        .map(|&(alpha, beta)| {
            let train = TrainConfig {
                alpha,
                beta,
                ta_enabled: true,
                ..config.train.clone()
            };
            (train, config.adapter.init)
        })
        .collect();
    let summaries = run_grid(config, &setups, &jobs)?;
    Ok(grid
        .into_iter()
        .zip(summaries)
        .map(|((alpha, beta), summary)| SweepRow { alpha, beta, summary })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    csv_string(
        &["alpha", "beta", "mean_acc", "std_acc"],
        rows.iter().map(|r| {
            vec![
                r.alpha.to_string(),
                r.beta.to_string(),
                r.summary.mean.to_string(),
                r.summary.std.to_string(),
            ]
        }),
    )
}
