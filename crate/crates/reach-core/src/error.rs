//! Shared error type for the whole crate.

use thiserror::Error;

/// Everything that can go wrong in this crate, in one enum.
///
/// Transport failures (socket-level) are deliberately a separate variant from
/// protocol violations and from environment-level errors so callers can tell
/// "the connection died" apart from "the peer rejected the request".
#[derive(Debug, Error)]
pub enum ReachError {
    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An input vector or matrix had the wrong length/shape.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An API was called in a state where it is not allowed (e.g. `step`
    /// before `reset`).
    #[error("usage error: {0}")]
    Usage(String),

    /// A sample was requested from a buffer that does not hold enough
    /// transitions yet.
    #[error("replay buffer underfull: holds {len}, requested {requested}")]
    BufferUnderfull { len: usize, requested: usize },

    /// Training produced a NaN loss or parameter; the run must abort rather
    /// than continue with poisoned weights.
    #[error("NaN detected during training: {0}")]
    NanDetected(String),

    /// A checkpoint file is unreadable, truncated, or from an incompatible
    /// version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Socket-level failure talking to a remote environment service.
    #[error("transport error: {0}")]
    Transport(String),

    /// The peer sent bytes that violate the wire protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The environment (local or remote) rejected a request.
    #[error("environment error: {0}")]
    Env(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReachError>;
