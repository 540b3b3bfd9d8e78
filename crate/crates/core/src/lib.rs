//! Layer-wise personalized federated learning simulator.
//!
//! Clients train small MLPs on private label-skewed shards. The server fuses
//! uploads layer by layer: the first `r` layers with similarity-weighted
//! personalized fusion, the remaining layers with a shared mean. FedAvg,
//! FedProx and FedAMP are expressed as configurations of the same engine.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod runtime;
pub mod seed;

pub use error::{Error, Result};
