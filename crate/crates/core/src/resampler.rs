//! Style feature resampling: per-class diagonal Gaussians fitted to the style
//! features, redrawn every epoch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numdiff::{dot_raw, Tensor, MIN_NORM};
use crate::rng::{self, BoxMuller};
use crate::stylegen::StyleBank;

/// Sample mean and unbiased per-dimension variance of one class's styles.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class: usize,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance, `M - 1` denominator.
    pub var: Vec<f64>,
    pub count: usize,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

/// Single-pass (Welford) mean and variance over `rows`.
pub fn estimate_stats(rows: &[&[f64]], class: usize) -> Result<ClassStats> {
    if rows.len() < 2 {
        return Err(Error::TooFewStyles(rows.len()));
    }
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (n, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::shape("estimate_stats", format!("[{dim}]"), format!("[{}]", row.len())));
        }
        let count = (n + 1) as f64;
        for ((mu, acc), &x) in mean.iter_mut().zip(&mut m2).zip(row.iter()) {
            let delta = x - *mu;
            *mu += delta / count;
            *acc += delta * (x - *mu);
        }
    }
    let denom = (rows.len() - 1) as f64;
    let var = m2.into_iter().map(|v| (v / denom).max(0.0)).collect();
    Ok(ClassStats {
        class,
        mean,
        var,
        count: rows.len(),
    })
}

/// Statistics for every class of a frozen bank.
pub fn bank_stats(bank: &StyleBank) -> Result<Vec<ClassStats>> {
    (0..bank.num_classes())
        .map(|j| estimate_stats(&bank.class_rows(j), j))
        .collect()
}

/// One elementwise draw from `N(mean, var)`, before normalization.
pub fn draw_raw<R: Rng>(stats: &ClassStats, gauss: &mut BoxMuller<R>) -> Vec<f64> {
    stats
        .mean
        .iter()
        .zip(&stats.var)
        .map(|(&mu, &var)| gauss.normal(mu, var.sqrt()))
        .collect()
}

/// One unit-norm draw. A near-zero draw is retried once.
pub fn draw_unit<R: Rng>(stats: &ClassStats, gauss: &mut BoxMuller<R>) -> Result<Vec<f64>> {
    for _ in 0..2 {
        let raw = draw_raw(stats, gauss);
        let norm = dot_raw(&raw, &raw).sqrt();
        if norm > MIN_NORM {
            return Ok(raw.into_iter().map(|v| v / norm).collect());
        }
    }
    Err(Error::ZeroNorm {
        tensor: format!("resampled feature of class {}", stats.class),
        norm: 0.0,
    })
}

/// `count` unit-norm rows drawn from one class's Gaussian.
pub fn resample<R: Rng>(stats: &ClassStats, count: usize, gauss: &mut BoxMuller<R>) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::InvalidArgument("resample count must be at least 1".into()));
    }
    let rows = (0..count)
        .map(|_| draw_unit(stats, gauss))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Generator for class `class` within stream `stream`.
pub fn class_stream(stream: u64, class: usize) -> BoxMuller<rand_chacha::ChaCha8Rng> {
    rng::gaussian(stream ^ class as u64)
}

/// Stream seed for one epoch of resampling.
pub fn epoch_stream(seed: u64, epoch: usize) -> u64 {
    rng::derive_seed(seed, &[0x5f12, epoch as u64])
}

/// Draws `per_class` rows for every class, laid out like a style bank
/// (row `i·N + j` belongs to class `j`). Returns rows and labels.
pub fn resample_classes(stats: &[ClassStats], per_class: usize, stream: u64) -> Result<(Tensor, Vec<usize>)> {
    let n = stats.len();
    let per_class_rows = stats
        .iter()
        .map(|s| resample(s, per_class, &mut class_stream(stream, s.class)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(per_class * n);
    let mut labels = Vec::with_capacity(per_class * n);
    for i in 0..per_class {
        for (j, block) in per_class_rows.iter().enumerate() {
            rows.push(block.row(i));
            labels.push(j);
        }
    }
    Ok((Tensor::from_rows(&rows)?, labels))
}

/// Fresh `M·N` features for `epoch`: `M` per class from that class's fit.
pub fn resample_epoch(bank: &StyleBank, seed: u64, epoch: usize) -> Result<(Tensor, Vec<usize>)> {
    let stats = bank_stats(bank)?;
    resample_classes(&stats, bank.num_styles(), epoch_stream(seed, epoch))
}
