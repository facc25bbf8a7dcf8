use thiserror::Error;

/// Errors raised by the library. Every variant carries a human-readable
/// diagnostic; numerical variants name the step at which they were raised.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed model: {0}")]
    Structural(String),

    #[error("model failed validation: {0}")]
    InvalidModel(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("singular regression at step {step}: {detail}")]
    SingularRegression { step: usize, detail: String },

    #[error("Girsanov weights degenerate at step {step}: effective sample size {ess:.1} of {n_paths} paths; use a shorter horizon or more paths")]
    WeightDegeneracy { step: usize, ess: f64, n_paths: usize },

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("finite-difference grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("singular constant: {0}")]
    Singular(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Argument(_) => "argument",
            Self::Structural(_) => "structural",
            Self::InvalidModel(_) => "invalid_model",
            Self::UnsupportedModel(_) => "unsupported_model",
            Self::SingularRegression { .. } => "singular_regression",
            Self::WeightDegeneracy { .. } => "weight_degeneracy",
            Self::NonFinite { .. } => "non_finite",
            Self::GridTooCoarse(_) => "grid_too_coarse",
            Self::Singular(_) => "singular",
            Self::DivisionByZero(_) => "division_by_zero",
        }
    }
}
