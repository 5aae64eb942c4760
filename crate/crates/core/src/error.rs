use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image file {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label map for image `{image_id}` is {label_width}x{label_height}, image is {width}x{height}")]
    DimensionMismatch {
        image_id: String,
        width: usize,
        height: usize,
        label_width: usize,
        label_height: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error(
        "could not place {requested} disjoint swatches in image `{image_id}` (placed {placed})"
    )]
    SamplingFailed {
        image_id: String,
        requested: usize,
        placed: usize,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: mean loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("missing label map for image `{0}`")]
    MissingLabelMap(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying with a different seed may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::SamplingFailed { .. })
    }

    /// Process exit code for the command-line front end:
    /// 1 configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Architecture(_) => 1,
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
