use std::path::PathBuf;

/// Errors surfaced by file formats and commands.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] msn_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for unusable input, 3 for a numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(msn_core::Error::NonFinite(_)) => 3,
            Error::Io { .. } | Error::Csv(_) => 1,
            _ => 2,
        }
    }
}
