//! Volumetric anomaly-detection laboratory.
//!
//! Soft labels from a Gaussian-mixture posterior, volume preprocessing and
//! augmentation, CNN / hybrid / ViT / Swin models on the [`volab_tensor`]
//! engine, regression training with cross-validation, evaluation metrics,
//! and three mechanistic instruments: effective receptive fields,
//! attention distances and centered kernel alignment.

pub mod error;
pub mod evaluation;
pub mod labels;
pub mod mechanistic;
pub mod models;
pub mod volume;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
