use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("integration diverged at t = {time:.4} s (state norm {norm:.3e})")]
    Divergence { time: f64, norm: f64 },

    #[error("{discarded} of {total} samples diverged (more than 10%)")]
    TooManyDiverged { discarded: usize, total: usize },

    #[error("insufficient data for block {block}: {samples} samples for {unknowns} unknowns per row (need at least {required})")]
    InsufficientData {
        block: String,
        samples: usize,
        unknowns: usize,
        required: usize,
    },

    #[error("rank-deficient regression in block {block}")]
    RankDeficient { block: String },

    #[error("matrix {what} is singular (smallest singular value {sigma_min:.3e}, condition estimate {condition:.3e}){hint}")]
    Singular {
        what: String,
        sigma_min: f64,
        condition: f64,
        hint: &'static str,
    },

    #[error("matrix {what} is not stable: spectral radius {rho:.6} >= 1")]
    Unstable { what: String, rho: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("MCP solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("line search stalled at residual {residual:.3e}; try enabling Newton regularization")]
    LineSearchStall { residual: f64 },

    #[error("{failed} of {total} control problems failed (more than 20%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::TooManyDiverged { .. } => "too_many_diverged",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Singular { .. } => "singular",
            Error::Unstable { .. } => "unstable",
            Error::MissingData(_) => "missing_data",
            Error::NonConvergence { .. } => "non_convergence",
            Error::LineSearchStall { .. } => "line_search_stall",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
