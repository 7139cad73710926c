//! In-context tabular classification with entropy-gated early exit.
//!
//! The crate trains a small transformer that classifies tabular rows by
//! attending over a labeled context (in-context learning, no per-dataset
//! fitting), attaches a trained decoder head to every layer, and at inference
//! walks the layers in order, stopping as soon as the decoded prediction is
//! confident enough (mean entropy below a threshold). A benchmark harness
//! measures the accuracy/runtime trade-off of that early-exit policy over
//! CSV datasets.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`rng`]: deterministic PCG32 randomness, keyed for O(1) random access.
//! - [`prior`]: synthetic classification task generator for pretraining.
//! - [`backbone`]: the sample-axis transformer and its pretraining loop.
//! - [`decoder`]: per-layer decoder heads and their frozen-backbone training.
//! - [`exit`]: the entropy-gated early-exit inference policy and FLOP model.
//! - [`checkpoint`]: binary serialization of trained weights.
//! - [`dataset`] / [`metrics`] / [`eval`]: CSV ingestion, scoring, and the
//!   threshold-sweep benchmark harness.
//! - [`config`] / [`cli`]: run configuration and the `icx` command-line tool.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod exit;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
