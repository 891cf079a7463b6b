use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants are grouped by how the CLI maps them to exit codes: configuration
/// and argument problems, data/file problems, and numerical failures raised
/// while an algorithm is running.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes that must agree do not. The message names the operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An index (class, sample, layer) is out of range.
    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    /// A value that must be finite is NaN or infinite. Names the field.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A binary or text input could not be decoded. Carries the byte offset
    /// where decoding stopped making sense.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A model file declares a schema version this build does not know.
    #[error("unsupported model schema version {found} (supported: {supported})")]
    UnsupportedSchema { found: u32, supported: u32 },

    /// Gradient too small for a stable attack step.
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dimension_mismatch(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
