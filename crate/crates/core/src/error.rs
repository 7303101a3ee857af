//! Error types. Tensor-level failures are separated from pipeline failures so
//! the engine stays usable without the training stack.

use thiserror::Error;

/// Failure inside the tensor engine: bad shapes, bad arguments, or numeric
/// domain violations caught by the guards.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// Input outside the mathematical domain of the op (log of a negative,
    /// division by zero, ...).
    #[error("{op}: domain violation: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// An op produced NaN or infinity despite passing its domain checks.
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArg {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            msg: msg.into(),
        }
    }
}

/// Top-level error for the library: engine faults plus everything the data,
/// training and evaluation pipelines can hit.
#[derive(Debug, Error)]
pub enum PlcaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (tensor file, manifest, checkpoint).
    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    /// Dataset-level inconsistency (missing split, label out of range, ...).
    #[error("data: {0}")]
    Data(String),

    #[error("training: {0}")]
    Train(String),
}

impl PlcaError {
    pub fn format(msg: impl Into<String>) -> Self {
        PlcaError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PlcaError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        PlcaError::Data(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Self {
        PlcaError::Train(msg.into())
    }
}

impl From<serde_json::Error> for PlcaError {
    fn from(e: serde_json::Error) -> Self {
        PlcaError::Format(format!("json: {e}"))
    }
}
