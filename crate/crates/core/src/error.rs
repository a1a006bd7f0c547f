use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("parameter out of range: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("network is not flagged first_row_only")]
    NotFirstRowOnly,

    #[error("heterogeneous architectures: {0}")]
    Heterogeneous(String),

    #[error("compiled network disagrees with functional evaluator: max |diff| = {max_diff:e} at {at:?}")]
    CompileMismatch { max_diff: f64, at: Vec<f64> },

    #[error("chart inversion failed: {0}")]
    ChartInversion(String),

    #[error("covering failed: {0}")]
    Covering(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ForgeError>;

pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> ForgeError {
    ForgeError::Shape {
        context,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
