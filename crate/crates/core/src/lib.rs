//! Continual learning for dense feed-forward networks.
//!
//! Learns a sequence of classification tasks without catastrophic forgetting
//! by measuring per-node semantic drift between weight snapshots (angular
//! distance by default) and selectively freezing, regularizing, or
//! duplicating hidden nodes, with loss-triggered dynamic expansion and
//! anchored retraining.

pub mod continual;
pub mod data;
pub mod drift;
pub mod error;
pub mod network;
pub mod optim;
pub mod real;
pub mod rng;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result, TaskId};
