use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A crop / slice / index reached outside the tensor.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A configuration value violates a documented invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API contract was broken by the caller (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (class, grid, ...) lies outside its valid range.
    #[error("index out of range: {0}")]
    Range(String),

    /// Bad input data (mixed image sizes, label outside the class set, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file; `offset` is the byte where parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Malformed binary artifact (checkpoint); `offset` is the failing byte.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
