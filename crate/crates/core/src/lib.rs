//! Prompt tuning and evaluation for frozen spoken language models over
//! discrete units.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`graph`] / [`optim`] — f64 tensors, tape-based reverse-mode
//!   autodiff, and Adam.
//! - [`dataset`] / [`kmeans`] / [`datagen`] — synthetic speech-like corpora:
//!   latent Markov feature generators, k-means quantization into discrete
//!   units, run-length deduplication with duration and pitch streams.
//! - [`lm`] — a small causal transformer over unit sequences (optionally with
//!   duration/pitch channels), pretraining, and frozen checkpoints.
//! - [`prompting`] — input and deep prompts injected into a frozen backbone.
//! - [`verbalizer`] — learnable and mapping-based readouts from unit
//!   distributions to task labels.
//! - [`tuner`] — the prompt-tuning loop, split evaluation, and run storage.
//! - [`metrics`] — accuracy, macro-F1, and equal error rate.
//! - [`shapley`] — exact Shapley attributions for the linear readout, with
//!   a brute-force cross-check and beeswarm exports.

pub mod checkpoint;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod kmeans;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod prompting;
pub mod shapley;
pub mod tensor;
pub mod tuner;
pub mod verbalizer;

pub use dataset::{Dataset, Split, UnitSequence};
pub use error::{Error, Result};
pub use graph::{grad_check, Graph, NodeId};
pub use optim::{adam_step, AdamState};
pub use tensor::{substream_seed, Tensor};
