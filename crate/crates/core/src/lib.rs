//! Source-free domain generalization in a joint text/image embedding space.
//!
//! The pipeline learns style word vectors against a text encoder, fits
//! per-class Gaussians over the resulting style features and resamples them,
//! then trains a linear classifier fused with a key–value text adapter on the
//! original and resampled features. No image is needed for training.

pub mod adapter;
pub mod bench;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod featio;
pub mod numdiff;
pub mod persist;
pub mod resampler;
pub mod rng;
pub mod stylegen;
pub mod trainer;

pub use error::{Error, Result};
