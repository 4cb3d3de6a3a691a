//! Dense-vector math and Byzantine-robust gradient aggregation for
//! peer-to-peer training simulations.
//!
//! The crate is split into small, pure modules:
//!
//! * [`vector`] — flat `f64` vectors and flattened model parameters,
//! * [`dataset`] — labeled batches, rank-based partitioning, and sharding,
//! * [`logistic`] — binary logistic regression: loss, gradient, SGD step,
//! * [`aggregation`] — averaging plus the robust rules (coordinate-wise
//!   median, geometric median, mean-around-median, validation scoring),
//! * [`attack`] — adversarial gradient transforms (sign flip, Gaussian
//!   noise).
//!
//! Everything is deterministic given its inputs and, where randomness is
//! involved, the caller-supplied RNG. The crate is `no_std`-compatible
//! (with `alloc`) when built without the default `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aggregation;
pub mod attack;
pub mod dataset;
mod error;
pub mod logistic;
mod math;
pub mod vector;

pub use aggregation::{AggregationRule, RuleKind, ZenoConfig};
pub use dataset::LabeledBatch;
pub use error::CoreError;
pub use logistic::TrainingConfig;
pub use vector::{DenseVector, ModelParams};
