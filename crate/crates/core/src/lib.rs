//! Iterated Kolmogorov solver for semilinear SDEs with additive noise.
//!
//! `dX = (A X + B0(t, X)) dt + sigma dW` is approximated by reweighting
//! samples of a Gaussian process whose mean follows the deterministic path.
//! A reusable [`bank::PathBank`] of Gaussian base paths feeds the
//! [`engine::Engine`], which builds the weights `I^n` and the series `u^n`.
//! [`reference`] provides a plain Euler–Maruyama estimator to compare against.

pub mod bank;
pub mod cli;
pub mod config;
pub mod deterministic;
pub mod distribution;
pub mod engine;
pub mod error;
pub mod grid;
pub mod linear;
pub mod models;
pub mod reference;
pub mod seeds;

pub use config::{parse_config, ExperimentConfig};
pub use bank::{assemble_shifted, generate, PathBank, ShiftedSamples};
pub use engine::{Engine, EngineOptions, Outcome, RunReport};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use linear::{LinearOperator, NoiseSpec};
pub use models::{DriftSpec, ModelSpec, ObservableSpec};
pub use reference::Estimate;
