use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward called on a non-scalar node with shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("backward already ran on this graph; run a fresh forward pass first")]
    BackwardTwice,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unknown capture point `{0}`")]
    UnknownCapturePoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("training aborted for client {client}: {reason}")]
    ClientAborted { client: usize, reason: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("CKA error: {0}")]
    Cka(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("missing checkpoint for round {round}: {path}")]
    MissingCheckpoint { round: usize, path: PathBuf },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
