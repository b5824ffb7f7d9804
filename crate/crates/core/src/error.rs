use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("label conflict: {0}")]
    Conflict(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "not_found",
            Error::Format(_) => "format",
            Error::Conflict(_) => "conflict",
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::DegenerateDistribution(_) => "degenerate_distribution",
            Error::State(_) => "state",
            Error::Plan(_) => "plan",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::DegenerateDistribution(_))
    }
}
