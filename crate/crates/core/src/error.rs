use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or filter parameter is outside its valid range.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Caller supplied inputs that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("trajectory leaves the grid at step {step} (position {px:.3}, {py:.3})")]
    TrajectoryOutOfGrid { step: usize, px: f64, py: f64 },

    #[error("degenerate existence configuration: presence normalizer is zero")]
    DegeneratePresence,

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{origin}: {source}")]
    Toml {
        origin: String,
        #[source]
        source: toml::de::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than the runtime.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Usage(_)
                | Error::TrajectoryOutOfGrid { .. }
                | Error::DegeneratePresence
                | Error::Toml { .. }
        )
    }
}
