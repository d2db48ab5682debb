//! Convolutional visual prompts for label-free test-time adaptation.
//!
//! A frozen classifier is adapted to shifted inputs by optimizing a tiny
//! convolution kernel (plus a mixing scale) against a self-supervised
//! contrastive loss. The crate also carries the comparison prompts (additive
//! and low-rank), weight-adaptation baselines, a corruption synthesizer and
//! the evaluation metrics.

pub mod adapters;
pub mod autodiff;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod models;
pub mod prompts;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
