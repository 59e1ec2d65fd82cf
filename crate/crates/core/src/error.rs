use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not orthonormal (residual {residual:.3e})")]
    NotOrthonormal { residual: f64 },

    #[error("point is behind the camera (camera-frame depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("view graph needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),

    #[error("view graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("invalid view graph: {0}")]
    InvalidGraph(String),

    #[error("vertex {0} has no ground-truth rotation")]
    MissingGroundTruth(usize),

    #[error("translation system is rank deficient (rank {rank} of {needed})")]
    RankDeficient { rank: usize, needed: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar output, got shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png encoding failed: {0}")]
    Png(String),
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}
