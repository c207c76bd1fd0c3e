use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not positive definite (pivot {pivot} below rank tolerance)")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is singular")]
    Singular,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("logistic fit separated: |coefficient| reached {max_abs_coefficient:.3} at iteration {iteration}")]
    Separation {
        max_abs_coefficient: f64,
        iteration: usize,
    },

    #[error("logistic fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("design labels do not match the fitted model: {0}")]
    LabelMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no observed outcomes with positive weight in the {arm} arm")]
    DegenerateArm { arm: &'static str },

    #[error("interacted design is rank deficient: {0}")]
    RankError(String),

    #[error("bread matrix of the estimating system is singular")]
    SingularBread,

    #[error("{failed} of {total} resampling replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),
}

impl Error {
    /// Stable machine-readable code, used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotSymmetric => "not_symmetric",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Singular => "singular",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::Separation { .. } => "separation",
            Error::NonConvergence { .. } => "non_convergence",
            Error::LabelMismatch(_) => "label_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateArm { .. } => "degenerate_arm",
            Error::RankError(_) => "rank_error",
            Error::SingularBread => "singular_bread",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::AllReplicationsFailed(_) => "all_replications_failed",
        }
    }
}
