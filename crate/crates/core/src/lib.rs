//! Inference-aware federated training of early-exit networks on a
//! cloud/edge/device tree.
//!
//! A request that arrives at a node is either answered at that node's exit
//! or forwarded to the parent, which runs a deeper exit. [`topology`] turns
//! arrival rates and per-node budgets into the share of traffic each exit
//! ends up serving. [`strategies`] maps those shares (or a static rule) to
//! per-exit training weights and per-client exit sampling probabilities.
//! [`fedtrain`] runs federated training with importance-weighted
//! aggregation, [`theory`] evaluates the error bounds for that procedure,
//! [`serving`] replays a test stream through the tree, and [`experiment`]
//! drives configured sweeps.

pub mod error;
pub mod experiment;
pub mod fedtrain;
pub mod models;
pub mod rng;
pub mod serving;
pub mod strategies;
pub mod theory;
pub mod topology;

pub use error::{Error, Result};
