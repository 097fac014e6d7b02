use std::path::PathBuf;

/// Errors raised across the crate. Each maps onto a process exit code via
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("crop error: {0}")]
    Crop(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("composite error: {0}")]
    Composite(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data problems, 4 for numeric or
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Fusion(_) | Error::Checkpoint(_) => 2,
            Error::Load { .. }
            | Error::Alignment(_)
            | Error::Crop(_)
            | Error::Normalization(_)
            | Error::Pairing(_)
            | Error::Composite(_)
            | Error::Report(_)
            | Error::Plot(_)
            | Error::Io { .. } => 3,
            Error::Numeric(_) | Error::Input(_) => 4,
        }
    }
}
