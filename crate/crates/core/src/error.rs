use std::path::PathBuf;

/// Errors produced by the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum AltError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error at {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("unparseable provider response: {0}")]
    Unparseable(String),

    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl AltError {
    pub fn validation(msg: impl Into<String>) -> Self {
        AltError::Validation(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        AltError::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AltError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AltError::Validation(_) => 1,
            AltError::Transport { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AltError>;
