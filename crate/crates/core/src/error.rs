use std::path::PathBuf;

/// Errors produced by the detection library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("timestamps are not strictly increasing at frame {0}")]
    NonMonotoneTimestamps(usize),

    #[error("invalid pixel value at frame {frame}, pixel {pixel}: {value}")]
    InvalidPixel { frame: usize, pixel: usize, value: f64 },

    #[error("missing required band {0}")]
    MissingBand(&'static str),

    #[error("series too short: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all pixels are masked")]
    AllMasked,

    #[error("non-finite log-likelihood encountered (corrupt input?)")]
    NonFiniteLikelihood,

    #[error("location ids differ: {0} vs {1}")]
    LocationMismatch(String, String),

    #[error("both classes are required, got only {0}")]
    SingleClass(&'static str),

    #[error("degenerate variance in {0}")]
    DegenerateVariance(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
