use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller broke a precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("finite-difference oracle: non-finite loss when perturbing parameter {group}[{index}]")]
    Oracle { group: String, index: usize },

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("degenerate modality: t_a = {t_a}, t_v = {t_v}")]
    DegenerateModality { t_a: usize, t_v: usize },

    #[error("undefined similarity: gradient of {0} has zero norm")]
    ZeroNorm(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }

    /// True for failures caused by arithmetic blowing up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Oracle { .. } | Error::NonFiniteLoss { .. } | Error::ZeroNorm(_))
    }
}
