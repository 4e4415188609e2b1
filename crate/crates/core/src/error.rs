//! Error types shared across the crate.
//!
//! Singularity errors are deliberate hard failures: a singular triangular
//! factor or a degenerate post-array diagonal signals exactly the kind of
//! filter breakdown this toolkit is meant to expose, so nothing in the
//! crate regularizes or repairs them silently.

use thiserror::Error;

/// Errors raised by the dense triangular / orthogonal kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    /// A Cholesky pivot was non-positive; reports the 1-based order of the
    /// offending leading principal minor.
    #[error("matrix is not positive definite (leading minor {minor})")]
    NotPositiveDefinite { minor: usize },

    /// A symmetry precondition failed beyond tolerance.
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,

    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    /// A triangular factor has a zero or subnormal diagonal entry.
    #[error("singular triangular factor (diagonal entry {index})")]
    SingularTriangular { index: usize },

    /// A general square matrix could not be inverted.
    #[error("singular matrix")]
    SingularMatrix,

    /// The triangular block of a post-array is numerically singular, so the
    /// post-array derivative formulas do not apply at this point.
    #[error("singular post-array (diagonal entry {index})")]
    SingularPostArray { index: usize },
}

impl LinalgError {
    pub(crate) fn dims(context: impl Into<String>) -> Self {
        LinalgError::DimensionMismatch {
            context: context.into(),
        }
    }
}

/// Errors raised while evaluating or simulating a parameterized model.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    /// The requested parameter point is outside the admissible domain
    /// (for example a measurement covariance that is not positive definite).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Errors raised by a filter engine during initialization or a step.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    /// The innovation covariance lost positive definiteness in working
    /// precision — the documented failure mode of the conventional engine.
    #[error("innovation covariance is singular in working precision")]
    InnovationCovSingular,

    /// eSRIF requires invertible F: the state-transition matrix is singular,
    /// so the information-form pre-array cannot be assembled.
    #[error("eSRIF requires invertible F: state-transition matrix is singular")]
    SingularStateTransition,

    /// A filter quantity became non-finite.
    #[error("non-finite filter quantity")]
    NonFinite,

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A filter pass that failed at a specific measurement step.
///
/// `step` is the 1-based measurement index; step 0 marks failures during
/// model evaluation or filter initialization.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("filter failure at step {step}: {source}")]
pub struct EstimateError {
    pub step: usize,
    #[source]
    pub source: FilterError,
}

impl EstimateError {
    pub fn new(step: usize, source: FilterError) -> Self {
        EstimateError { step, source }
    }
}
