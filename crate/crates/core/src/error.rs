use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operator is not {0}")]
    IllFormedOperator(String),

    #[error("eigendecomposition of a {0}x{0} symmetric matrix did not converge")]
    Eigendecomposition(usize),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("explicit Euler step is unstable: dt * max|a_k| = {product} (must be < 2)")]
    UnstableStep { product: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite state at step {step} (sample {sample:?}, component {component})")]
    NonFiniteState {
        sample: Option<usize>,
        step: usize,
        component: usize,
    },

    #[error("weights diverged: {reason} at iteration {iteration}, sample {sample}, coarse index {index}")]
    WeightsDiverged {
        iteration: usize,
        sample: usize,
        index: usize,
        reason: &'static str,
    },

    #[error("iteration diverged: err({iteration}) = {err:e} exceeds the threshold {threshold:e}")]
    IterationDiverged {
        iteration: usize,
        err: f64,
        threshold: f64,
    },

    #[error("path bank of {requested} bytes exceeds the memory cap of {cap} bytes")]
    MemoryCap { requested: u128, cap: u128 },

    #[error("{}: {message}", path.display())]
    BankFormat { path: PathBuf, message: String },

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::WeightsDiverged { .. } | Error::IterationDiverged { .. } | Error::NonFiniteState { .. } => 3,
            Error::Io { .. } | Error::BankFormat { .. } => 4,
            _ => 2,
        }
    }
}
