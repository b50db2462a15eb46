use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("input `{0}` must be sorted in non-decreasing order")]
    Unsorted(&'static str),

    #[error(
        "exponent overflow: max |sqrt(2 nu)/l * delta.x| = {max_exponent:.3e} exceeds {limit}; \
         rescale coordinates (e.g. affinely into [0,1]^d) and transform the lengthscale accordingly"
    )]
    ExponentOverflow { max_exponent: f64, limit: f64 },

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("matrix is not numerically positive semi-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("conjugate gradient breakdown at iteration {iteration}, column {column}: {detail}")]
    SolverBreakdown {
        iteration: usize,
        column: usize,
        detail: String,
    },

    #[error(
        "conjugate gradient did not converge within {max_iter} iterations \
         (residual norm {residual:.3e}, tolerance {tol:.3e})"
    )]
    SolverDidNotConverge {
        max_iter: usize,
        residual: f64,
        tol: f64,
    },

    #[error("design matrix is rank deficient (pivot {pivot:.3e} below tolerance)")]
    RankDeficient { pivot: f64 },

    #[error("optimizer produced a non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },

    #[error("{0}")]
    SizeLimit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
