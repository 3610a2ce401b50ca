use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, masks, state).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An operation produced NaN or an infinity.
    #[error("numerical failure: {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Mask renormalization had nothing left to renormalize.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// The requested optimum is not reachable in the chosen observation mode.
    #[error("optimum unreachable: {reason} (shared-policy bound {shared_bound})")]
    Unreachable { reason: String, shared_bound: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
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
}
