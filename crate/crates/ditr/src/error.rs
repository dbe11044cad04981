//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate intensity range: image is constant")]
    DegenerateIntensityRange,

    #[error("intensity {value} outside [0, 1]; normalize images before binning")]
    IntensityOutOfRange { value: f64 },

    #[error("image too small after downsampling: {width}x{height} cannot hold a {patch_size}x{patch_size} patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch_size: usize,
    },

    #[error("no overlap between images at parameters {params:?}")]
    NoOverlap { params: Vec<f64> },

    #[error("patch support out of bounds at center ({x}, {y})")]
    PatchOutOfBounds { x: f64, y: f64 },

    #[error("singular transform cannot be inverted (det = {det})")]
    SingularTransform { det: f64 },

    #[error("invalid architecture descriptor: {reason}")]
    InvalidArchitecture { reason: String },

    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate labels: training set must contain both classes")]
    DegenerateLabels,

    #[error("invalid bracket ({a}, {b}, {c}): need b between a and c with f(b) below both ends")]
    InvalidBracket { a: f64, b: f64, c: f64 },

    #[error("non-finite objective value at {point:?}")]
    NonFiniteObjective { point: Vec<f64> },

    #[error("empty histogram: no in-mask samples")]
    EmptyHistogram,

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("could not generate a valid case after {attempts} attempts: {reason}")]
    CaseGeneration { attempts: usize, reason: String },

    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with pipeline context (e.g. the pair index and stage it occurred in).
    pub fn annotate(self, context: impl Into<String>) -> Self {
        Error::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
