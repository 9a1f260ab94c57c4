use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("{value} is outside the valid range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("sampling relation cannot be met: {reason} (minimum pupil grid {required_grid})")]
    Sampling { reason: String, required_grid: usize },

    #[error("prescription incomplete: {0}")]
    PrescriptionIncomplete(String),

    #[error("degenerate camera model: {0}")]
    DegenerateModel(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("no edge found in region of interest: {0}")]
    EdgeNotFound(String),

    #[error("source image {width}x{height} is smaller than the {target_width}x{target_height} target")]
    SourceTooSmall {
        width: usize,
        height: usize,
        target_width: usize,
        target_height: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
