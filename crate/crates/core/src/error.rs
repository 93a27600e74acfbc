use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("rank {rank} out of range [1, {max}]")]
    Rank { rank: usize, max: usize },

    #[error("degenerate importance: mean {0:e} too close to zero to normalize")]
    DegenerateImportance(f64),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with the slot or block that produced it.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            Error::ManifestMismatch(m) => Error::ManifestMismatch(format!("{ctx}: {m}")),
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            Error::Budget(m) => Error::Budget(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::DegenerateImportance(_))
    }
}
