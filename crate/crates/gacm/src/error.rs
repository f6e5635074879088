//! Error taxonomy shared by the library and the command-line tool.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised during model construction, evaluation, and fitting.
///
/// Each variant maps onto one of the process exit codes used by the
/// command-line tool (see [`Error::exit_code`]): configuration and input
/// problems exit with 1, non-convergence with 2, numeric failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Response dimension outside the supported range.
    #[error("response dimension must be at least 1, got {0}")]
    InvalidDimension(usize),

    /// A vector or matrix argument has the wrong size.
    #[error("{what}: got {got}, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    /// Malformed configuration (model description, CLI flags, plan request).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// A requested operation is not available for the chosen parametrisation.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Too few rows to build a smooth term of the requested dimension.
    #[error("smooth term on covariate '{covariate}' needs at least {k} rows, got {n}")]
    InsufficientData {
        covariate: String,
        k: usize,
        n: usize,
    },

    /// A covariate is (numerically) constant, so no spline range exists.
    #[error("covariate '{0}' is constant; cannot place spline knots")]
    ConstantCovariate(String),

    /// Spline basis dimension below the cubic minimum.
    #[error("basis dimension k must be at least 3, got {0}")]
    BasisTooSmall(usize),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value in {what}{}", fmt_row(row))]
    NonFinite {
        what: &'static str,
        row: Option<usize>,
    },

    /// An exponential would overflow (predictor magnitude above 700).
    #[error("predictor magnitude {value} exceeds 700; exp would overflow{}", fmt_row(row))]
    ExpOverflow { value: f64, row: Option<usize> },

    /// Symmetric eigendecomposition did not converge.
    #[error("eigendecomposition failed{}", fmt_row(row))]
    EigenFailure { row: Option<usize> },

    /// A matrix required to be positive definite was not.
    #[error("matrix not positive definite{}", fmt_row(row))]
    NotPositiveDefinite { row: Option<usize> },

    /// Ridge perturbation of the penalized Hessian kept failing.
    #[error("penalized Hessian not positive definite after {attempts} ridge attempts")]
    PerturbationFailed { attempts: usize },

    /// Newton line search could not find an acceptable step.
    #[error(
        "line search failed at inner iteration {iteration}: no increase after {halvings} halvings"
    )]
    LineSearchFailure { iteration: usize, halvings: usize },

    /// The objective is not finite at the starting coefficients.
    #[error("objective not finite at the initial coefficients")]
    BadInitialPoint,

    /// A smoothing-parameter update became ill-defined.
    #[error("smoothing update failed for penalty '{penalty}': {reason}")]
    SmoothingUpdateFailed { penalty: String, reason: String },

    /// File or serialization problem, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_row(row: &Option<usize>) -> String {
    match row {
        Some(i) => format!(" (observation {i})"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code for the command-line tool: 1 for usage/configuration
    /// problems, 2 for non-convergence, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidDimension(_)
            | Error::ShapeMismatch { .. }
            | Error::Config(_)
            | Error::Data(_)
            | Error::Unsupported(_)
            | Error::InsufficientData { .. }
            | Error::ConstantCovariate(_)
            | Error::BasisTooSmall(_)
            | Error::Io { .. } => 1,
            Error::LineSearchFailure { .. } | Error::BadInitialPoint => 2,
            Error::NonFinite { .. }
            | Error::ExpOverflow { .. }
            | Error::EigenFailure { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::PerturbationFailed { .. }
            | Error::SmoothingUpdateFailed { .. } => 3,
        }
    }

    /// Attach an observation index to a per-row numeric error, leaving other
    /// variants untouched. Used by the accumulator so kernel failures report
    /// which row triggered them.
    pub fn with_row(self, row: usize) -> Self {
        match self {
            Error::NonFinite { what, row: None } => Error::NonFinite {
                what,
                row: Some(row),
            },
            Error::ExpOverflow { value, row: None } => Error::ExpOverflow {
                value,
                row: Some(row),
            },
            Error::EigenFailure { row: None } => Error::EigenFailure { row: Some(row) },
            Error::NotPositiveDefinite { row: None } => {
                Error::NotPositiveDefinite { row: Some(row) }
            }
            other => other,
        }
    }
}
