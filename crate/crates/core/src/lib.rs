//! Flash-backed speculative decoding: greedy gain/cost token-tree drafting,
//! lossless tree verification, early-exit pruning, and a deterministic
//! smartphone latency simulator.

pub mod drafting;
pub mod error;
pub mod harness;
pub mod models;
pub mod predictor;
pub mod pruning;
pub mod simulator;
pub mod tree;
pub mod verification;

pub use error::{Error, Result};
