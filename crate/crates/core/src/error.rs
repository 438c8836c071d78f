use thiserror::Error;
use trackgroup_nd::NdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite {what} on scene `{scene}`")]
    NonFinite { what: String, scene: String },

    #[error(transparent)]
    Nd(#[from] NdError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for this failure: 2 configuration, 3 data,
    /// 4 numeric, 5 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidBox(_) | Error::Input(_) | Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::Nd(NdError::Checkpoint(_) | NdError::Io(_)) => 5,
            Error::Nd(_) => 1,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
