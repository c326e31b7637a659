use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix (det = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inverted element: det F = {0}")]
    InvertedElement(f64),

    #[error("direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },

    #[error("evaluation budget exhausted after {} evaluations (best objective {:e})", .0.evals, .0.best_f)]
    BudgetExhausted(Box<crate::cmaes::CmaOutcome>),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Data(_) | Error::FormatVersion { .. })
    }
}
