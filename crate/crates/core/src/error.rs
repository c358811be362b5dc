use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad spec values, partition violations, unknown settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that violate an operation's contract (shapes, label domains).
    #[error("contract error: {0}")]
    Contract(String),

    /// Not enough eligible instances to satisfy a request.
    #[error("capacity error: class `{class}` needs {needed} instances but only {available} are available")]
    Capacity {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("failed to load `{}`: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    /// Dangling or inconsistent references between records.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    /// Malformed binary payloads (bad magic, CRC mismatch, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
