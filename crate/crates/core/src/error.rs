use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A time or index fell outside the valid domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor shapes or parameter trees did not line up.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value was rejected.
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// A container file could not be parsed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A prerequisite artifact is missing.
    #[error("missing dependency: {what} ({})", path.display())]
    Dependency { what: String, path: PathBuf },

    /// Training produced a non-finite value.
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Dependency { .. } => 3,
            Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}
