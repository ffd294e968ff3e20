//! Deterministic simulator and scheduling library for federated learning
//! over emulated human-body-communication links.
//!
//! The crate implements the BodyFed-HBC round loop: posture-dependent
//! channel emulation, constrained greedy client selection with diversity and
//! correlated-failure terms, bias-corrected aggregation, energy accounting,
//! and a deterministic multi-seed experiment harness.
//!
//! Everything stochastic draws from named RNG substreams of a master seed,
//! so a scenario replays bit-identically; with the `parallel` feature
//! (default) the data-parallel loops run on rayon without changing any
//! result.

pub mod aggregation;
pub mod channel;
pub mod datasets;
pub mod energy;
pub mod error;
pub mod harness;
pub mod learning;
pub mod linalg;
pub mod parallel;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
pub use parallel::ExecMode;

/// Build identifier embedded in every summary document.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
