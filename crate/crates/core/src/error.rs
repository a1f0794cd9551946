use alloc::string::String;

/// Errors raised by the numeric kernel, the filters and the analysis tools.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric positive definite ({context})")]
    NotSpd { context: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite evaluation of {0} during finite differencing")]
    NonFiniteEvaluation(&'static str),
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("innovation covariance is not positive definite ({0})")]
    SingularInnovation(&'static str),
    #[error("rank condition violated: rank({what}) = {rank}, required {required}")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        required: usize,
    },
    #[error("input estimation covariance is rank deficient (min eigenvalue {min_eig:e}, threshold {threshold:e})")]
    InputCovSingular { min_eig: f64, threshold: f64 },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("filter kind `{filter}` is not compatible with model `{model}`: {reason}")]
    IncompatibleModel {
        filter: &'static str,
        model: String,
        reason: &'static str,
    },
    #[error("missing exogenous input: {0}")]
    MissingInput(&'static str),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("bound `{0}` required by the selected check is missing")]
    MissingBound(&'static str),
    #[error("transition noise covariance is degenerate")]
    DegenerateNoise,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
