//! Environment-conditioned tail reweighting for TV-based invariant risk
//! minimization.
//!
//! The library implements the full minimax game — a predictor updated by
//! descent against a tail-weighting adversary, an invariance dual, and an
//! optional latent-environment inference adversary updated by ascent —
//! together with ERM/IRMv1/group-DRO/TV-IRM baselines, a synthetic
//! mixed-shift benchmark, and brute-force oracles for the closed forms the
//! trainers rely on.
//!
//! Entry points:
//! - [`trainer::train`] runs any method on a [`data::Dataset`] and returns a
//!   [`trainer::RunReport`].
//! - [`data::generate_simulation`] builds the seeded mixed-shift benchmark.
//! - [`commands`] backs the `ectr` binary (`generate`, `train`, `sweep`,
//!   `verify`).
//! - [`verify`] holds the oracle and invariant check suites.
//!
//! See the crate `examples/` directory for one runnable program per major
//! capability.

pub mod commands;
pub mod config;
pub mod data;
pub mod envinfer;
pub mod error;
pub mod invariance;
pub mod logging;
pub mod manifest;
pub mod numerics;
pub mod trainer;
pub mod verify;
pub mod weighting;

pub use error::{Error, Result};
