//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting, tuning and resampling.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant (shape, emptiness, finiteness).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Dimensions of an input disagree with the model, naming the offending cluster.
    #[error("dimension mismatch in cluster `{cluster}`: {detail}")]
    DimensionMismatch { cluster: String, detail: String },

    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    /// The marginal covariance of a cluster could not be factorized.
    #[error("marginal covariance of cluster `{cluster}` is singular or not positive definite")]
    SingularMarginalCovariance { cluster: String },

    /// A (weighted) Gram matrix is rank deficient; pseudo-inversion is refused.
    #[error("{what} is singular; consider removing collinear covariates")]
    RankDeficient { what: String },

    /// Called an operation that is undefined at gamma = 0.
    #[error("{op} requires gamma > 0; use the likelihood path for gamma = 0")]
    GammaZero { op: &'static str },

    /// The fixed-point variance update left the feasible region and the
    /// safeguarded step could not restore it.
    #[error("variance update infeasible: {0}")]
    VarianceUpdate(String),

    /// Too many bootstrap replicates failed to converge.
    #[error(
        "{dropped} of {total} bootstrap replicates failed to converge (> 20%); \
         inspect the fit and data before interpreting intervals"
    )]
    BootstrapUnstable { dropped: usize, total: usize },

    /// An unknown simulation scenario code.
    #[error("unknown scenario `{code}`; valid codes are S1..S9")]
    UnknownScenario { code: String },

    /// An interval with lower bound above its upper bound.
    #[error("interval lower bound {lower} exceeds upper bound {upper}")]
    InvalidInterval { lower: f64, upper: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
