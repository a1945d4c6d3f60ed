//! Error type shared by every construction and evaluation routine.

use thiserror::Error;

/// Errors raised while building or consuming the FMM data structures.
#[derive(Debug, Error)]
pub enum FmmError {
    /// A size or level limit was exceeded.
    #[error("capacity exceeded: {what} (limit {limit})")]
    Capacity { what: String, limit: u64 },

    /// An input violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// More compute units were requested than there are non-empty boxes to share.
    #[error("infeasible partition: {units} units but only {boxes} non-empty boxes at level {level}")]
    InfeasiblePartition { units: usize, boxes: usize, level: u32 },

    /// The exchange manager could not find any node exporting a requested box.
    #[error("unroutable import request for box {index} at level {level} from node {node}")]
    Routing { node: u32, level: u32, index: u64 },

    /// A binary container did not match the expected layout.
    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FmmError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(FmmError::Domain(msg.into()))
}
