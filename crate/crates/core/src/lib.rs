//! Array square-root Kalman filtering with exact derivative propagation.
//!
//! This crate implements three interchangeable Kalman filter engines for
//! parameterized linear-Gaussian state-space models — the conventional
//! covariance recursion, the extended square-root covariance filter (eSRCF)
//! and the extended square-root information filter (eSRIF) — together with
//! their sensitivity-augmented variants, which propagate the exact
//! derivatives of every filter quantity with respect to the unknown model
//! parameters. The derivatives of the square-root engines are obtained by
//! differentiating the per-step orthogonal triangularization itself
//! (see [`array_sensitivity`]), so the negative log-likelihood and its
//! gradient are evaluated with the same numerical robustness as the filters.
//!
//! On top of the engines sit a likelihood accumulator ([`likelihood`]), a
//! gradient-based maximum-likelihood estimator ([`estimator`]) and a
//! benchmark harness ([`benchkit`]) that reproduces the ill-conditioned
//! identification experiments the square-root engines exist to survive.
//!
//! All numerical kernels are generic over the scalar type through
//! [`Scalar`]; `f64` is the intended production type and the type the
//! benchmarks pin, `f32` works for experimentation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps};

pub mod array_sensitivity;
pub mod benchkit;
pub mod error;
pub mod estimator;
pub mod filters;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod triarray;

/// Scalar type the numerical kernels are generic over.
///
/// Implemented by `f32` and `f64`. Tolerances inside the crate scale with
/// `T::epsilon()`, so the same code exhibits the documented breakdown
/// behaviour earlier in `f32` than in `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ScalarOperand
    + Sum
    + FromStr
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssignOps
        + FromPrimitive
        + ScalarOperand
        + Sum
        + FromStr
        + Display
        + Debug
        + Send
        + Sync
        + 'static
{
}

/// Lossless-enough cast from `f64` constants into the working scalar.
pub(crate) fn from_f64<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant must be representable in the scalar type")
}

/// Dense matrix alias used throughout the crate; defaults to `f64`.
pub type Matrix<T = f64> = ndarray::Array2<T>;
/// Dense vector alias used throughout the crate; defaults to `f64`.
pub type Vector<T = f64> = ndarray::Array1<T>;

pub use array_sensitivity::{ArrayPartition, Differentiated, DiffMatrix, DiffVector};
pub use error::{EstimateError, FilterError, LinalgError, ModelError};
pub use estimator::{EstimationResult, OptimizerConfig, Termination};
pub use filters::EngineKind;
pub use likelihood::NegLogLikelihood;
pub use model::{MeasurementLog, ModelDims, ModelEval, ModelSpec};
pub use triarray::{Orientation, OrthogonalFactor, TriangularFactor};
