//! Desk-scale toolkit for studying backdoor data poisoning of multi-label
//! image classifiers.
//!
//! The pipeline mirrors a classic patch-trigger attack: a small square of
//! pixels is stamped onto a fraction of the training images, their labels are
//! rewritten to a single attacker-chosen target class, and a small
//! convolutional network is trained on the tampered set. The crate provides
//!
//! * [`dataset`] — a controllable synthetic multi-label grayscale dataset
//!   with on-disk persistence (PNG images plus a CSV manifest),
//! * [`trigger`] — trigger injection, training-set poisoning, and
//!   construction of clean/triggered/mixed evaluation sets,
//! * [`model`] — a from-scratch CNN (manual forward/backward passes) with
//!   per-epoch checkpointing and activation taps,
//! * [`metrics`] — attack success rate and micro-average AUROC variants with
//!   min/max-over-epochs aggregation,
//! * [`explain`] — Grad-CAM saliency maps, overlay rendering, and a
//!   quantitative trigger-localization score,
//! * [`harness`] — reproducible experiment sweeps emitting CSV results.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! harness and CLI run everything in `f64` via the aliases below. All
//! randomness flows through seeded ChaCha generators, so every artifact is
//! reproducible byte-for-byte from its configuration.

pub mod dataset;
pub mod error;
pub mod explain;
pub mod harness;
pub mod metrics;
pub mod model;
mod rng;
pub mod scalar;
pub mod tensor;
pub mod trigger;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases used by the harness and the CLI.
pub type Image64 = dataset::Image<f64>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type Sample64 = dataset::Sample<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type PredictionRecord64 = metrics::PredictionRecord<f64>;
pub type SaliencyMap64 = explain::SaliencyMap<f64>;

/// Single-precision aliases for callers that trade accuracy for speed.
pub type Image32 = dataset::Image<f32>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = model::Model<f32>;
