use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the testbed.
///
/// Variants map one-to-one onto the failure classes the CLI turns into
/// exit codes (see [`ForgeError::exit_code`]).
#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint load error at key `{key}`: {reason}")]
    Load { key: String, reason: String },

    #[error("surgery plan error: {0}")]
    Plan(String),

    #[error("surgery error: {0}")]
    Surgery(String),

    #[error("graft error: {0}")]
    Graft(String),

    #[error("sequence assembly error: {0}")]
    Assembly(String),

    #[error("tokenization error: unknown character {0:?}")]
    Tokenization(char),

    #[error("transition detection error: {0}")]
    Detection(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

impl ForgeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ForgeError::Load {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure, 5 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForgeError::Config(_) | ForgeError::Json(_) | ForgeError::Plan(_) => 2,
            ForgeError::NonFinite { .. } => 4,
            ForgeError::Protocol(_) => 5,
            _ => 3,
        }
    }
}
