//! Training-and-evaluation harness for synthetic-data augmentation of
//! small, imbalanced image-classification corpora.
//!
//! The pipeline: load labeled manifests, train one style-based generator
//! per class with differentiable augmentation, sample a synthetic corpus,
//! fine-tune a two-class CNN with and without the synthetic images, and
//! compare the two arms with per-class metrics.

pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod diffaug;
pub mod error;
pub mod gan;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod synthesis;
pub mod tensor;
pub mod toy;
pub mod transforms;

pub use error::{Error, Result};
