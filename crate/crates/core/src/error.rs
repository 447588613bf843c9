use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("support has {size} profiles, above the cap of {cap}; reduce the number of factors or levels")]
    SupportTooLarge { size: u128, cap: usize },
    #[error("non-finite parameter at factor {factor}, index {index}")]
    NonFiniteParameter { factor: usize, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("cannot split: {0}")]
    Split(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("singular fit; aliased columns: {}", .0.join(", "))]
    SingularFit(Vec<String>),
    #[error("positivity violation: {0}")]
    Positivity(String),
    #[error("zero probability: {0}")]
    ZeroProbability(String),
    #[error("lambda {lambda} too small: first-order system is singular")]
    LambdaTooSmall { lambda: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("inference failed at `{coefficient}`: {message}")]
    InferenceFailure { coefficient: String, message: String },
    #[error("grid has {size} points, above the cap of {cap}")]
    GridTooLarge { size: u128, cap: u128 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularFit(_)
                | Error::LambdaTooSmall { .. }
                | Error::NumericalFailure(_)
                | Error::InferenceFailure { .. }
        )
    }
}
