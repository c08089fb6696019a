//! Late-fusion multimodal classifiers with modality-balancing training.
//!
//! The crate provides small MLP encoders fused into a shared head, two
//! balancing strategies (on-the-fly prediction modulation, which drops the
//! features of dominant modalities, and on-the-fly gradient modulation, which
//! rescales their gradients and adds covariance-matched noise), a synthetic
//! imbalanced dataset generator, evaluation metrics and an experiment harness.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
pub use matrix::Matrix;
