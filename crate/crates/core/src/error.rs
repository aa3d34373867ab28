use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A standing modelling assumption does not hold for the given instance.
    #[error("assumption violated ({assumption}): {detail}")]
    AssumptionViolation {
        assumption: &'static str,
        detail: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("index {index} out of range (length {len})")]
    Index { index: usize, len: usize },

    #[error("chain did not mix to within {alpha:e} after {cap} steps")]
    NonMixing { alpha: f64, cap: usize },

    /// The projected Bellman equation has no unique solution.
    #[error("no unique solution of the projected Bellman equation (operator F-bar = 0 is singular): {0}")]
    NoUniqueSolution(String),

    #[error("bound inapplicable: {0}")]
    BoundInapplicable(String),

    #[error("weighted least-squares problem is rank deficient: {0}")]
    LeastSquaresDegenerate(String),

    #[error("contraction certification failed at iterate {iterate}: norm {norm} > gamma_c {gamma_c}")]
    CertificationFailed {
        iterate: usize,
        norm: f64,
        gamma_c: f64,
    },

    #[error("critic diverged at outer iteration {iteration}, step {step} (|w|_inf = {norm:e})")]
    CriticDivergence {
        iteration: usize,
        step: usize,
        norm: f64,
    },

    #[error("instance construction failed: {0}")]
    Construction(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for the CLI: 2 for invalid input or configuration,
    /// 3 when an instance or run violates a modelling or bound condition.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Index { .. }
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::AssumptionViolation { .. }
            | Error::NonMixing { .. }
            | Error::NoUniqueSolution(_)
            | Error::BoundInapplicable(_)
            | Error::LeastSquaresDegenerate(_)
            | Error::CertificationFailed { .. }
            | Error::CriticDivergence { .. } => 3,
            Error::Construction(_) => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn assumption(assumption: &'static str, detail: impl Into<String>) -> Self {
        Error::AssumptionViolation {
            assumption,
            detail: detail.into(),
        }
    }

    pub(crate) fn inapplicable(msg: impl Into<String>) -> Self {
        Error::BoundInapplicable(msg.into())
    }
}
