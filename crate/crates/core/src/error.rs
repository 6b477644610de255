use thiserror::Error;

/// Errors produced by the flow classification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("flow has no packets")]
    EmptyFlow,

    #[error("timestamp regression: {current} < {previous}")]
    TimestampRegression { previous: f64, current: f64 },

    #[error("packet at {timestamp}s lies outside slot window [{start}, {end})")]
    OutsideSlot { timestamp: f64, start: f64, end: f64 },

    #[error("slot width must be positive, got {0}")]
    InvalidSlotWidth(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset needs at least 2 known classes, found {0}")]
    TooFewClasses(usize),

    #[error("class {class:?} has {count} flows; at least 2 are needed to stratify")]
    TooFewFlows { class: String, count: usize },

    #[error("no final predictions to calibrate")]
    NoCalibrationData,

    #[error("class set mismatch: {0:?} vs {1:?}")]
    ClassMismatch(Vec<String>, Vec<String>),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
