use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("clip {clip_id}: cannot load frame {index}: {message}")]
    FrameLoad { clip_id: String, index: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Engine(#[from] vol3d::Error),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint { path: path.into(), message: message.into() }
    }

    /// Errors caused by the user's inputs (as opposed to failures while
    /// running an otherwise valid experiment).
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation(_) | Error::InvalidArgument(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
