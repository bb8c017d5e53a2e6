use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation stack.
#[derive(Debug, Error)]
pub enum HtflError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("csv {path:?} row {row}: {msg}")]
    Csv { path: PathBuf, row: usize, msg: String },

    #[error("method {method} is inapplicable to group {group}: {reason}")]
    Inapplicable {
        method: String,
        group: String,
        reason: String,
    },

    #[error("aggregation rejected packets from senders {senders:?}: {reason}")]
    Aggregation { senders: Vec<usize>, reason: String },

    #[error("client {client} failed during {stage}: {source}")]
    Client {
        client: usize,
        stage: &'static str,
        #[source]
        source: Box<HtflError>,
    },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HtflError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> HtflError {
    HtflError::InvalidArgument(msg.into())
}
