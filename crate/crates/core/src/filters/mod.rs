//! Filter engines: conventional Kalman recursion, eSRCF and eSRIF.
//!
//! All three engines consume the same [`ModelEval`](crate::model::ModelEval)
//! snapshot and measurement stream and expose the same [`StepOutput`]; they
//! differ in what they propagate and in how roundoff treats them. Each
//! engine has a plain step and a sensitivity step; the sensitivity variant
//! runs the identical value computation and additionally produces the
//! derivatives of every published quantity, so value paths agree bitwise
//! between the two modes.
//!
//! A filter run is sequential in k; independent runs share nothing and may
//! execute concurrently.

use std::io::Write;
use std::str::FromStr;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::array_sensitivity::DiffMatrix;
use crate::error::{FilterError, LinalgError};
use crate::io::{fmt_scalar, write_meta_lines, FileMeta};
use crate::triarray::{cholesky_derivative, cholesky_upper, cholesky_upper_psd, TriangularFactor};
use crate::{Matrix, Scalar, Vector};

mod conventional;
mod srcf;
mod srif;

pub use conventional::{ConvFilterState, Conventional};
pub use srcf::{Esrcf, SqrtCovState};
pub use srif::{Esrif, SqrtInfoState};

/// Which filter engine drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Conventional,
    Esrcf,
    Esrif,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Conventional, EngineKind::Esrcf, EngineKind::Esrif];

    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::Conventional => "conventional",
            EngineKind::Esrcf => "esrcf",
            EngineKind::Esrif => "esrif",
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "conventional" | "kf" => Ok(EngineKind::Conventional),
            "esrcf" | "srcf" => Ok(EngineKind::Esrcf),
            "esrif" | "srif" => Ok(EngineKind::Esrif),
            other => Err(format!(
                "unknown engine '{other}' (expected conventional, esrcf or esrif)"
            )),
        }
    }
}

/// Innovation data published by one filter step.
///
/// Derivative vectors are empty when the step ran in plain mode.
#[derive(Debug, Clone)]
pub enum Innovations<T> {
    /// `(eₖ, R_{e,k})` from the conventional recursion.
    Conventional {
        residual: Vector<T>,
        cov: Matrix<T>,
        residual_derivs: Vec<Vector<T>>,
        cov_derivs: Vec<Matrix<T>>,
    },
    /// `(ēₖ, R_{e,k}^{1/2})` from the eSRCF, plus the normalized gain and
    /// the residual block γₖ (an array by-product; no derivative exists
    /// for it and nothing downstream consumes it).
    SqrtCovariance {
        normalized_residual: Vector<T>,
        cov_factor: TriangularFactor<T>,
        normalized_residual_derivs: Vec<Vector<T>>,
        cov_factor_derivs: Vec<Matrix<T>>,
        normalized_gain: Matrix<T>,
        residual_block: Vector<T>,
    },
    /// `(ēₖ, R_{e,k}^{-T/2})` from the eSRIF, plus the unread trailing
    /// rows of the post-array.
    SqrtInformation {
        normalized_residual: Vector<T>,
        inv_cov_factor: TriangularFactor<T>,
        normalized_residual_derivs: Vec<Vector<T>>,
        inv_cov_factor_derivs: Vec<Matrix<T>>,
        residual_rows: Matrix<T>,
    },
}

impl<T: Scalar> Innovations<T> {
    pub fn obs_dim(&self) -> usize {
        match self {
            Innovations::Conventional { residual, .. } => residual.len(),
            Innovations::SqrtCovariance {
                normalized_residual, ..
            }
            | Innovations::SqrtInformation {
                normalized_residual, ..
            } => normalized_residual.len(),
        }
    }

    /// Diagonal the trace file reports: the innovation covariance factor
    /// for the square-root engines, the covariance itself for the
    /// conventional one.
    fn trace_diag(&self) -> Vec<T> {
        match self {
            Innovations::Conventional { cov, .. } => cov.diag().to_vec(),
            Innovations::SqrtCovariance { cov_factor, .. } => cov_factor.matrix().diag().to_vec(),
            Innovations::SqrtInformation { inv_cov_factor, .. } => {
                inv_cov_factor.matrix().diag().to_vec()
            }
        }
    }

    fn trace_residual(&self) -> &Vector<T> {
        match self {
            Innovations::Conventional { residual, .. } => residual,
            Innovations::SqrtCovariance {
                normalized_residual, ..
            }
            | Innovations::SqrtInformation {
                normalized_residual, ..
            } => normalized_residual,
        }
    }
}

/// Everything a filter step publishes.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Predicted state x̂ₖ₊₁|ₖ.
    pub predicted_state: Vector<T>,
    /// Derivatives of the predicted state (empty in plain mode).
    pub predicted_state_derivs: Vec<Vector<T>>,
    pub innovations: Innovations<T>,
}

/// Per-step trace CSV: `k,e_1..m,re_diag_1..m,xhat_1..n`.
pub fn write_step_trace_csv<T: Scalar, W: Write>(
    outputs: &[StepOutput<T>],
    w: &mut W,
    meta: &FileMeta,
) -> std::io::Result<()> {
    write_meta_lines(w, meta, &[])?;
    let m = outputs.first().map_or(0, |o| o.innovations.obs_dim());
    let n = outputs.first().map_or(0, |o| o.predicted_state.len());
    let mut header = String::from("k");
    for j in 1..=m {
        header.push_str(&format!(",e_{j}"));
    }
    for j in 1..=m {
        header.push_str(&format!(",re_diag_{j}"));
    }
    for j in 1..=n {
        header.push_str(&format!(",xhat_{j}"));
    }
    writeln!(w, "{header}")?;
    for (k, out) in outputs.iter().enumerate() {
        let mut row = format!("{}", k + 1);
        for v in out.innovations.trace_residual() {
            row.push(',');
            row.push_str(&fmt_scalar(*v));
        }
        for v in out.innovations.trace_diag() {
            row.push(',');
            row.push_str(&fmt_scalar(v));
        }
        for v in &out.predicted_state {
            row.push(',');
            row.push_str(&fmt_scalar(*v));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// A triangular factor together with its parameter derivatives.
#[derive(Debug, Clone)]
pub(crate) struct DiffFactor<T> {
    pub factor: TriangularFactor<T>,
    pub derivs: Vec<Matrix<T>>,
}

/// Cholesky factor and forward-mode derivatives of a positive definite
/// differentiated matrix.
pub(crate) fn diff_cholesky<T: Scalar>(m: &DiffMatrix<T>) -> Result<DiffFactor<T>, FilterError> {
    let factor = cholesky_upper(&m.value).map_err(FilterError::Linalg)?;
    let derivs = m
        .derivs
        .iter()
        .map(|ds| cholesky_derivative(&factor, ds).map_err(FilterError::Linalg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DiffFactor { factor, derivs })
}

/// Like [`diff_cholesky`] but tolerates a positive semidefinite value.
///
/// A singular factor only admits derivatives when the corresponding `dS`
/// is exactly zero (θ-independent covariance); anything else is a genuine
/// [`LinalgError::SingularTriangular`] breakdown.
pub(crate) fn diff_cholesky_psd<T: Scalar>(
    m: &DiffMatrix<T>,
) -> Result<DiffFactor<T>, FilterError> {
    let factor = cholesky_upper_psd(&m.value).map_err(FilterError::Linalg)?;
    let n = factor.order();
    let derivs = m
        .derivs
        .iter()
        .map(|ds| {
            if ds.iter().all(|v| *v == T::zero()) {
                Ok(Matrix::<T>::zeros((n, n)))
            } else {
                cholesky_derivative(&factor, ds).map_err(FilterError::Linalg)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DiffFactor { factor, derivs })
}

/// Inverse-transpose of an upper factor (`C = U⁻ᵀ`, lower triangular) and
/// its derivatives `dC = −C·dUᵀ·C`.
pub(crate) fn inv_transpose_factor<T: Scalar>(
    f: &DiffFactor<T>,
) -> Result<(TriangularFactor<T>, Vec<Matrix<T>>), LinalgError> {
    let n = f.factor.order();
    let c = crate::triarray::tri_solve(
        &f.factor,
        &Matrix::<T>::eye(n),
        crate::triarray::TriSolve::LeftTransposed,
    )?;
    let c = TriangularFactor::from_parts_unchecked(c, crate::triarray::Orientation::Lower);
    let dcs = f
        .derivs
        .iter()
        .map(|du| -c.matrix().dot(&du.t()).dot(c.matrix()))
        .collect();
    Ok((c, dcs))
}

/// `B·u` with the all-zero case detected, so zero-input and zero-B paths
/// stay bitwise identical to the no-input path.
pub(crate) fn control_product<T: Scalar>(b: &Matrix<T>, u: &ArrayView1<T>) -> Option<Vector<T>> {
    if u.iter().all(|v| *v == T::zero()) {
        return None;
    }
    let bu = b.dot(u);
    if bu.iter().all(|v| *v == T::zero()) {
        None
    } else {
        Some(bu)
    }
}
