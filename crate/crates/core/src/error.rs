//! Crate-wide error type.

use crate::network::NodeId;

/// Task index within a sequence (0-based).
pub type TaskId = usize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input data (bad magic number, out-of-range label, bad container).
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter or longer than its header claims.
    #[error("length error: {0}")]
    Length(String),

    /// Two inputs that must agree do not (counts, shapes, architectures).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Requested more data than the pool provides.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Index outside the current bounds (fold, stale node id).
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// No head registered for the task.
    #[error("unknown task: no head for task {0}")]
    UnknownTask(TaskId),

    /// A head already exists for the task.
    #[error("conflict: head for task {0} already exists")]
    TaskConflict(TaskId),

    /// Non-finite value encountered; `location` names the offending tensor.
    #[error("numeric error: non-finite {what} in {location}")]
    NonFinite { what: &'static str, location: String },

    /// Operation not supported on this target (e.g. duplicating a head row).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An operation that needs at least one element got none.
    #[error("undefined on empty input: {0}")]
    EmptyInput(String),

    /// A node id that no longer resolves after surgery.
    #[error("index error: node {0:?} does not exist")]
    UnknownNode(NodeId),
}

pub type Result<T> = std::result::Result<T, Error>;
