use thiserror::Error;

/// Errors raised by samplers, models, and experiment plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("potential undefined at probe")]
    PotentialUndefined,

    #[error("weight degeneracy: all weights zero")]
    WeightDegeneracy,

    #[error("particle diverged (reduce h)")]
    ParticleDiverged,

    #[error("weights are not normalized (sum = {0})")]
    UnnormalizedWeights(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("design matrix is rank deficient (smallest |R_jj| = {0:e})")]
    RankDeficient(f64),

    #[error("largest eigenvalue must be positive, got {0}")]
    NonPositiveEigenvalue(f64),

    #[error("power iteration start vector vanished after 3 redraws")]
    ZeroStartVector,

    #[error("importance sampling degenerate: every log-ratio is -inf")]
    ProposalDegenerate,

    #[error("all grid points diverged: {0}")]
    AllGridPointsFailed(String),

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("{0}")]
    Dataset(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("order {order}: {source}")]
    AtOrder {
        order: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Innermost error once iteration/order annotations are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } | Error::AtOrder { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical algorithm itself (as opposed to bad input).
    pub fn is_runtime_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::ParticleDiverged
                | Error::WeightDegeneracy
                | Error::NonFinite(_)
                | Error::NotPositiveDefinite(_)
                | Error::ProposalDegenerate
                | Error::AllGridPointsFailed(_)
                | Error::PotentialUndefined
                | Error::RankDeficient(_)
                | Error::ZeroStartVector
        )
    }
}
