use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: format error at byte offset {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate attention: every key is masked for query row {row}")]
    DegenerateAttention { row: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("video {video_id}: {source}")]
    Video {
        video_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_video(self, video_id: &str) -> Self {
        Error::Video { video_id: video_id.to_string(), source: Box::new(self) }
    }

    /// Process exit code for this failure: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Numeric(_) => 3,
            Error::Video { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
