use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MnpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MnpError {
    /// A caller passed an argument outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model inputs violate an invariant (Σ not PD, labels out of range, ...).
    #[error("model error: {0}")]
    Model(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A floating point routine failed to produce a usable result.
    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("matrix `{name}` is not positive definite even with jitter {max_jitter:e}")]
    Singular { name: String, max_jitter: f64 },

    #[error("dimension {dim} exceeds the {what} cap of {cap}")]
    Capacity {
        what: &'static str,
        dim: usize,
        cap: usize,
    },

    #[error("rejection sampling infeasible: estimated acceptance {acceptance:e}")]
    InfeasibleMethod { acceptance: f64 },

    #[error("CAVI did not converge after {sweeps} sweeps (last change {last_delta:e})")]
    NotConverged { sweeps: usize, last_delta: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MnpError {
    pub(crate) fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        MnpError::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MnpError::Io {
            path: path.into(),
            source,
        }
    }
}
