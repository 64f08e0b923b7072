use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the
/// public operations can report.
#[derive(Debug, Error)]
pub enum ScobError {
    /// Tensor shapes are incompatible for the requested primitive.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value was NaN or infinite where a finite number is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar loss, non-one-hot label, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid training data (e.g. a sample without any positive label).
    #[error("data error: {0}")]
    Data(String),

    /// A metric could not be computed from the given inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// The finite-difference oracle detected a broken precondition.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// A persisted file is malformed or has an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScobError>;
