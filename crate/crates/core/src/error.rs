use std::path::PathBuf;

use crate::losses::LossBreakdown;

/// Everything that can go wrong in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is invalid; `key` is the dotted field path.
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{what} needs images of at least {min_height}x{min_width}, got {height}x{width}")]
    TooSmall {
        what: &'static str,
        min_height: usize,
        min_width: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite values in {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step} ({breakdown})")]
    NonFiniteLoss { step: u64, breakdown: LossBreakdown },

    #[error("unpaired files without a counterpart: {}", .0.join(", "))]
    Orphans(Vec<String>),

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("failed to encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "pretrained {what} weights unavailable ({detail}); set `{key}=seeded_random` to run with seeded random weights instead"
    )]
    PretrainedUnavailable {
        what: &'static str,
        key: &'static str,
        detail: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match the requested configuration: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
