//! Negative log-likelihood accumulation from filter step outputs.
//!
//! The accumulator consumes [`StepOutput`]s from any engine and builds the
//! performance index
//!
//! ```text
//! μ(θ) = (Nm/2)·ln 2π + ½ Σₖ { ln det R_{e,k} + eₖᵀR_{e,k}⁻¹eₖ }
//! ```
//!
//! together with its gradient. For the square-root engines the per-step
//! terms come from the published factors directly: `ln det R_{e,k}` is
//! `2·Σ ln|dᵢᵢ|` over the factor diagonal (convention-free: row resigning
//! flips a diagonal entry and its derivative together), the quadratic term
//! is `ēₖᵀēₖ`, and the gradient adds `tr[R_e^{-1/2}·dR_e^{1/2}] + ēᵀdē`
//! per parameter. The eSRIF path uses `tr[U⁻¹U'] = −tr[V⁻¹V']` for
//! `V = U⁻ᵀ` (differentiate `VᵀU = I`), so only the published inverse
//! factor is ever touched.
//!
//! Terms accumulate strictly in step order with plain summation, so traces
//! reproduce bitwise.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FilterError, LinalgError};
use crate::filters::{Innovations, StepOutput};
use crate::io::{fmt_scalar, write_meta_lines, FileMeta};
use crate::triarray::{cholesky_upper, tri_solve, tri_solve_vec, TriSolve};
use crate::{Matrix, Scalar};

/// Accumulated performance index value and gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegLogLikelihood<T> {
    /// μ(θ), the negative log-likelihood including the Gaussian constant.
    pub value: T,
    /// ∂μ/∂θᵢ.
    pub gradient: Vec<T>,
    /// Number of accumulated measurement steps.
    pub samples: usize,
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiStepTerm<T> {
    pub step: usize,
    pub value_increment: T,
    pub gradient_increment: Vec<T>,
}

/// Streaming accumulator; one per filter run.
#[derive(Debug, Clone)]
pub struct PiAccumulator<T> {
    value: T,
    gradient: Vec<T>,
    samples: usize,
    trace: Option<Vec<PiStepTerm<T>>>,
}

impl<T: Scalar> PiAccumulator<T> {
    pub fn new(params: usize) -> Self {
        PiAccumulator {
            value: T::zero(),
            gradient: vec![T::zero(); params],
            samples: 0,
            trace: None,
        }
    }

    pub fn with_trace(params: usize) -> Self {
        let mut acc = Self::new(params);
        acc.trace = Some(Vec::new());
        acc
    }

    /// Folds one step into the index, dispatching on the engine variant.
    pub fn add_step(&mut self, out: &StepOutput<T>) -> Result<(), FilterError> {
        let (inc, grad_inc) = match &out.innovations {
            Innovations::Conventional {
                residual,
                cov,
                residual_derivs,
                cov_derivs,
            } => conventional_term(residual, cov, residual_derivs, cov_derivs)?,
            Innovations::SqrtCovariance {
                normalized_residual,
                cov_factor,
                normalized_residual_derivs,
                cov_factor_derivs,
                ..
            } => sqrt_term(
                normalized_residual,
                cov_factor.matrix(),
                normalized_residual_derivs,
                cov_factor_derivs,
                false,
            )?,
            Innovations::SqrtInformation {
                normalized_residual,
                inv_cov_factor,
                normalized_residual_derivs,
                inv_cov_factor_derivs,
                ..
            } => sqrt_term(
                normalized_residual,
                inv_cov_factor.matrix(),
                normalized_residual_derivs,
                inv_cov_factor_derivs,
                true,
            )?,
        };
        self.value += inc;
        for (g, gi) in self.gradient.iter_mut().zip(&grad_inc) {
            *g += *gi;
        }
        self.samples += 1;
        if let Some(rows) = &mut self.trace {
            rows.push(PiStepTerm {
                step: self.samples,
                value_increment: inc,
                gradient_increment: grad_inc,
            });
        }
        Ok(())
    }

    pub fn trace(&self) -> Option<&[PiStepTerm<T>]> {
        self.trace.as_deref()
    }

    /// Final value; fails if accumulation produced a non-finite index.
    pub fn finish(self) -> Result<NegLogLikelihood<T>, FilterError> {
        if !self.value.is_finite() || self.gradient.iter().any(|g| !g.is_finite()) {
            return Err(FilterError::NonFinite);
        }
        Ok(NegLogLikelihood {
            value: self.value,
            gradient: self.gradient,
            samples: self.samples,
        })
    }
}

/// ½[ln det R_e + eᵀR_e⁻¹e] + (m/2)ln2π and its gradient terms from the
/// conventional quantities.
fn conventional_term<T: Scalar>(
    residual: &crate::Vector<T>,
    cov: &Matrix<T>,
    residual_derivs: &[crate::Vector<T>],
    cov_derivs: &[Matrix<T>],
) -> Result<(T, Vec<T>), FilterError> {
    let m = residual.len();
    let factor = match cholesky_upper(cov) {
        Ok(f) => f,
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            return Err(FilterError::InnovationCovSingular)
        }
        Err(e) => return Err(FilterError::Linalg(e)),
    };
    let half = crate::from_f64::<T>(0.5);
    let two_pi = crate::from_f64::<T>(std::f64::consts::TAU);

    let log_det = factor
        .matrix()
        .diag()
        .iter()
        .map(|d| d.abs().ln())
        .sum::<T>()
        * crate::from_f64::<T>(2.0);
    let alpha = tri_solve_vec(&factor, residual, TriSolve::LeftTransposed)?;
    let quad = alpha.iter().map(|v| *v * *v).sum::<T>();
    let inc = half * (crate::from_f64::<T>(m as f64) * two_pi.ln() + log_det + quad);

    let mut grad = Vec::with_capacity(residual_derivs.len());
    if !residual_derivs.is_empty() {
        let w = tri_solve_vec(&factor, &alpha, TriSolve::Left)?; // R_e⁻¹ e
        let eye = Matrix::<T>::eye(m);
        let u_inv_t = tri_solve(&factor, &eye, TriSolve::LeftTransposed)?;
        let cov_inv = tri_solve(&factor, &u_inv_t, TriSolve::Left)?;
        for (de, dre) in residual_derivs.iter().zip(cov_derivs) {
            let tr = cov_inv
                .iter()
                .zip(dre.iter())
                .map(|(a, b)| *a * *b)
                .sum::<T>();
            let wdw = w.dot(&dre.dot(&w));
            let wde = w.dot(de);
            grad.push(half * tr - half * wdw + wde);
        }
    }
    Ok((inc, grad))
}

/// Per-step term from a square-root factor. `inverse` selects the eSRIF
/// convention where the published factor is `R_e^{-T/2}`.
fn sqrt_term<T: Scalar>(
    normalized_residual: &crate::Vector<T>,
    factor: &Matrix<T>,
    residual_derivs: &[crate::Vector<T>],
    factor_derivs: &[Matrix<T>],
    inverse: bool,
) -> Result<(T, Vec<T>), FilterError> {
    let m = normalized_residual.len();
    let half = crate::from_f64::<T>(0.5);
    let two_pi = crate::from_f64::<T>(std::f64::consts::TAU);

    let mut log_abs = T::zero();
    for (i, d) in factor.diag().iter().enumerate() {
        if !d.is_normal() {
            return Err(FilterError::Linalg(LinalgError::SingularTriangular {
                index: i,
            }));
        }
        log_abs += d.abs().ln();
    }
    let log_det_sqrt = if inverse { -log_abs } else { log_abs };
    let quad = normalized_residual.iter().map(|v| *v * *v).sum::<T>();
    let inc = half * crate::from_f64::<T>(m as f64) * two_pi.ln() + log_det_sqrt + half * quad;

    let mut grad = Vec::with_capacity(residual_derivs.len());
    for (de, df) in residual_derivs.iter().zip(factor_derivs) {
        // tr[U⁻¹·dU] over triangular factors is the diagonal ratio sum.
        let mut tr = T::zero();
        for (i, d) in factor.diag().iter().enumerate() {
            tr += df[[i, i]] / *d;
        }
        if inverse {
            tr = -tr;
        }
        grad.push(tr + normalized_residual.dot(de));
    }
    Ok((inc, grad))
}

/// Per-step PI trace CSV: `k,mu_increment,grad_increment_1..p`.
pub fn write_pi_trace_csv<T: Scalar, W: Write>(
    rows: &[PiStepTerm<T>],
    w: &mut W,
    meta: &FileMeta,
) -> std::io::Result<()> {
    write_meta_lines(w, meta, &[])?;
    let p = rows.first().map_or(0, |r| r.gradient_increment.len());
    let mut header = String::from("k,mu_increment");
    for j in 1..=p {
        header.push_str(&format!(",grad_increment_{j}"));
    }
    writeln!(w, "{header}")?;
    for row in rows {
        let mut line = format!("{},{}", row.step, fmt_scalar(row.value_increment));
        for g in &row.gradient_increment {
            line.push(',');
            line.push_str(&fmt_scalar(*g));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
