//! FedKLPR: a deterministic federated-learning simulator combining
//! contrastive local training with a proxy memory bank, KL-divergence
//! regularization, adaptive magnitude pruning gated by cross-round
//! recovery, KL/pruning-ratio weighted aggregation with sparse activation
//! skipping, and a bit-exact sparse-model wire format with communication
//! cost accounting.

pub mod agg;
pub mod config;
pub mod error;
pub mod fed;
pub mod losses;
pub mod nnet;
pub mod params;
pub mod prune;
pub mod pseudo;
pub mod report;
pub mod seeding;
pub mod synthdata;
pub mod wire;

pub use error::{DecodeError, Error, Result};
