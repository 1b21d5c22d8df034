use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file contents. `offset` is the byte position
    /// where decoding stopped, when known.
    #[error("format error{}: {msg}", .offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { offset: Option<u64>, msg: String },

    #[error("non-finite loss at iteration {iteration}: rec={rec}, guide={guide}")]
    NonFinite { iteration: usize, rec: f64, guide: f64 },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format { offset: None, msg: msg.into() }
    }

    pub fn format_at(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset: Some(offset), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::NonFinite { .. } => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } => 4,
        }
    }
}
