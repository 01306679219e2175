use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular perturbation kernel at t = {t} (sigma_t = 0)")]
    SingularKernel { t: f64 },

    #[error("non-finite value produced by {op} at step {step}")]
    NonFinite { op: String, step: usize },

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("lower bound violated: {0}")]
    LowerBound(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("separation precondition failed: {0}")]
    Separation(String),

    #[error("insufficient resolution: {0}")]
    Resolution(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence {
        epoch: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag, used for per-cell status columns.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::SingularKernel { .. } => "singular-kernel",
            Error::NonFinite { .. } => "non-finite",
            Error::UnsupportedDimension(_) => "unsupported-dimension",
            Error::Shape(_) => "shape",
            Error::LowerBound(_) => "lower-bound",
            Error::Config(_) => "config",
            Error::Separation(_) => "separation",
            Error::Resolution(_) => "resolution",
            Error::Divergence { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
