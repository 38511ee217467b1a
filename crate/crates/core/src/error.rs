use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    ShapeValueMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("extent {extent} is not divisible by factor {factor}")]
    NotDivisible { extent: usize, factor: usize },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("function evaluation was not finite at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("empty instance mask")]
    EmptyMask,
    #[error("instance out of bounds: {0}")]
    OutOfBounds(String),
    #[error("instance intensity {intensity} is within 0.2 of background {background}")]
    LowContrast { intensity: f64, background: f64 },
    #[error("downscale ratio must be >= 1.0, got {0}")]
    InvalidRatio(f64),

    #[error("no annotated cells: weak classification loss is undefined")]
    EmptyAnnotation,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input is {width}x{height}, model expects {expected}x{expected}")]
    InputSize {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("unknown category {category} (model has {categories})")]
    UnknownCategory { category: usize, categories: usize },

    #[error("scene placement failed after {retries} retries: {reason}")]
    Placement { retries: usize, reason: String },

    #[error("{context}: {reason} at byte {position}")]
    Decode {
        context: &'static str,
        reason: String,
        position: usize,
    },
    #[error("unsupported {context} version {found} (supported: {supported})")]
    Version {
        context: &'static str,
        found: u32,
        supported: u32,
    },
    #[error("corpus checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("guidance diverged at step {step}: loss {loss}")]
    GuidanceDiverged { step: usize, loss: f64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    CorpusStage(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
