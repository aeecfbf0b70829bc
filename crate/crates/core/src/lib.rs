//! Text representations trained against attribute discriminators through a
//! gradient-reversal layer, plus the tooling to measure how much of a
//! protected attribute still leaks from them.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape with the gradient-reversal op.
//! - [`layers`]: embeddings, LSTM, convolution + max-pool, feed-forward heads.
//! - [`models`]: BiLSTM tagger and CNN classifier with per-attribute heads.
//! - [`training`]: joint objective, Adam/SGD, epoch loop, checkpoints.
//! - [`data`]: corpus formats, vocabulary, splits, synthetic confound data.
//! - [`eval`]: metrics, group gaps, majority baselines, attacker probes.
//! - [`pipeline`]: corpus-level fit, evaluate, attack and cross-validation.
//! - [`experiment`]: the synthetic confound experiment.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Result, VeilError};
