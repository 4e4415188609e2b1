//! The conventional Kalman recursion and its direct-differentiation
//! sensitivity equations.
//!
//! This engine exists as the baseline whose numerical fragility the
//! square-root engines remove: the error covariance is propagated as a full
//! matrix through the difference Riccati equation, and roundoff can (and on
//! the benchmark problem does) destroy its definiteness. The covariance is
//! symmetrized after each update; no Joseph-form or other stabilization is
//! applied, on purpose.

use ndarray::ArrayView1;

use super::{control_product, Innovations, StepOutput};
use crate::array_sensitivity::{DiffMatrix, DiffVector};
use crate::error::{FilterError, LinalgError};
use crate::model::ModelEval;
use crate::triarray::{cholesky_upper, tri_solve, tri_solve_vec, TriSolve};
use crate::{Matrix, Scalar, Vector};

/// Predicted state and error covariance, with derivatives in sensitivity
/// mode.
///
/// `cov` is symmetric by construction; positive semidefiniteness is NOT
/// asserted at runtime — its loss under roundoff is the phenomenon this
/// engine demonstrates.
#[derive(Debug, Clone)]
pub struct ConvFilterState<T> {
    /// x̂ₖ|ₖ₋₁.
    pub state: Vector<T>,
    /// Pₖ|ₖ₋₁.
    pub cov: Matrix<T>,
    pub state_derivs: Vec<Vector<T>>,
    pub cov_derivs: Vec<Matrix<T>>,
}

/// Conventional Kalman filter engine over a fixed model evaluation.
#[derive(Debug, Clone)]
pub struct Conventional<T> {
    f: DiffMatrix<T>,
    b: DiffMatrix<T>,
    h: DiffMatrix<T>,
    r: DiffMatrix<T>,
    x0: DiffVector<T>,
    pi0: DiffMatrix<T>,
    /// GQGᵀ and its derivatives, fixed per θ.
    gqg: Matrix<T>,
    gqg_derivs: Vec<Matrix<T>>,
}

impl<T: Scalar> Conventional<T> {
    pub fn new(model: &ModelEval<T>) -> Result<Self, FilterError> {
        let g = &model.noise_map;
        let q = &model.process_cov;
        let gqg = g.value.dot(&q.value).dot(&g.value.t());
        let gqg_derivs = (0..model.param_count())
            .map(|i| {
                let dg = &g.derivs[i];
                let dq = &q.derivs[i];
                dg.dot(&q.value).dot(&g.value.t())
                    + g.value.dot(dq).dot(&g.value.t())
                    + g.value.dot(&q.value).dot(&dg.t())
            })
            .collect();
        Ok(Conventional {
            f: model.state_transition.clone(),
            b: model.input_map.clone(),
            h: model.observation.clone(),
            r: model.measurement_cov.clone(),
            x0: model.init_mean.clone(),
            pi0: model.init_cov.clone(),
            gqg,
            gqg_derivs,
        })
    }

    /// Initial condition: the prior of the first measured state,
    /// x̂₁|₀ = x̄₀ and P₁|₀ = Π₀.
    pub fn init(&self) -> ConvFilterState<T> {
        ConvFilterState {
            state: self.x0.value.clone(),
            cov: self.pi0.value.clone(),
            state_derivs: Vec::new(),
            cov_derivs: Vec::new(),
        }
    }

    pub fn init_sensitivity(&self) -> ConvFilterState<T> {
        ConvFilterState {
            state: self.x0.value.clone(),
            cov: self.pi0.value.clone(),
            state_derivs: self.x0.derivs.clone(),
            cov_derivs: self.pi0.derivs.clone(),
        }
    }

    pub fn step(
        &self,
        state: &ConvFilterState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(ConvFilterState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, false)
    }

    pub fn sensitivity_step(
        &self,
        state: &ConvFilterState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(ConvFilterState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, true)
    }

    fn step_impl(
        &self,
        state: &ConvFilterState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
        sensitivity: bool,
    ) -> Result<(ConvFilterState<T>, StepOutput<T>), FilterError> {
        let f = &self.f.value;
        let h = &self.h.value;
        let x = &state.state;
        let p = &state.cov;

        let residual = &z - &h.dot(x);
        let re = symmetrize(&(h.dot(p).dot(&h.t()) + &self.r.value));
        let re_factor = match cholesky_upper(&re) {
            Ok(fct) => fct,
            Err(LinalgError::NotPositiveDefinite { .. }) => {
                return Err(FilterError::InnovationCovSingular)
            }
            Err(e) => return Err(FilterError::Linalg(e)),
        };

        // K = F P Hᵀ Re⁻¹ via two triangular solves with Re = UᵀU.
        let fph = f.dot(p).dot(&h.t());
        let solve_re = |rhs: &Matrix<T>| -> Result<Matrix<T>, FilterError> {
            let y = tri_solve(&re_factor, &rhs.t().to_owned(), TriSolve::LeftTransposed)?;
            let xt = tri_solve(&re_factor, &y, TriSolve::Left)?;
            Ok(xt.t().to_owned())
        };
        let gain = solve_re(&fph)?;

        let mut next_state = f.dot(x) + gain.dot(&residual);
        if let Some(bu) = control_product(&self.b.value, &u) {
            next_state = next_state + &bu;
        }
        let next_cov = symmetrize(
            &(f.dot(p).dot(&f.t()) + &self.gqg - gain.dot(&re).dot(&gain.t())),
        );

        let mut state_derivs = Vec::new();
        let mut cov_derivs = Vec::new();
        let mut residual_derivs = Vec::new();
        let mut re_derivs = Vec::new();
        if sensitivity {
            let p_count = self.f.param_count();
            for i in 0..p_count {
                let df = &self.f.derivs[i];
                let dh = &self.h.derivs[i];
                let dr = &self.r.derivs[i];
                let dx = &state.state_derivs[i];
                let dp = &state.cov_derivs[i];

                let d_residual = -(dh.dot(x)) - h.dot(dx);
                let d_re = symmetrize(
                    &(dh.dot(p).dot(&h.t()) + h.dot(dp).dot(&h.t()) + h.dot(p).dot(&dh.t()) + dr),
                );
                let d_fph = df.dot(p).dot(&h.t()) + f.dot(dp).dot(&h.t()) + f.dot(p).dot(&dh.t());
                let d_gain = solve_re(&(&d_fph - &gain.dot(&d_re)))?;

                let mut d_next_state =
                    df.dot(x) + f.dot(dx) + d_gain.dot(&residual) + gain.dot(&d_residual);
                if let Some(dbu) = control_product(&self.b.derivs[i], &u) {
                    d_next_state = d_next_state + &dbu;
                }
                let d_next_cov = symmetrize(
                    &(df.dot(p).dot(&f.t())
                        + f.dot(dp).dot(&f.t())
                        + f.dot(p).dot(&df.t())
                        + &self.gqg_derivs[i]
                        - d_gain.dot(&re).dot(&gain.t())
                        - gain.dot(&d_re).dot(&gain.t())
                        - gain.dot(&re).dot(&d_gain.t())),
                );

                state_derivs.push(d_next_state);
                cov_derivs.push(d_next_cov);
                residual_derivs.push(d_residual);
                re_derivs.push(d_re);
            }
        }

        let out = StepOutput {
            predicted_state: next_state.clone(),
            predicted_state_derivs: state_derivs.clone(),
            innovations: Innovations::Conventional {
                residual,
                cov: re,
                residual_derivs,
                cov_derivs: re_derivs,
            },
        };
        Ok((
            ConvFilterState {
                state: next_state,
                cov: next_cov,
                state_derivs,
                cov_derivs,
            },
            out,
        ))
    }
}

fn symmetrize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let half = crate::from_f64::<T>(0.5);
    (&m.t().to_owned() + m) * half
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate, families, ModelDims, ModelSpec, SystemMatrices};
    use crate::model::{DerivativeMode, ValueFn};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn scalar_model(r: f64, theta_in_r: bool) -> ModelSpec<f64> {
        let dims = ModelDims::new(1, 1, 1, 1, 1);
        let values: ValueFn<f64> = Arc::new(move |t: &[f64]| {
            let rv = if theta_in_r { t[0] } else { r };
            Ok(SystemMatrices {
                state_transition: Matrix::<f64>::eye(1),
                input_map: Matrix::<f64>::zeros((1, 1)),
                noise_map: Matrix::<f64>::zeros((1, 1)),
                observation: Matrix::<f64>::eye(1),
                process_cov: Matrix::<f64>::zeros((1, 1)),
                measurement_cov: Matrix::<f64>::eye(1) * rv,
                init_mean: Vector::<f64>::zeros(1),
                init_cov: Matrix::<f64>::eye(1),
            })
        });
        ModelSpec::new(dims, values, DerivativeMode::FiniteDifference { step: None })
    }

    #[test]
    fn hand_computed_scalar_step() {
        let spec = scalar_model(1.0, false);
        let model = evaluate(&spec, &[0.0]).unwrap();
        let eng = Conventional::new(&model).unwrap();
        let st = eng.init();
        let z = Vector::from(vec![2.0]);
        let u = Vector::<f64>::zeros(1);
        let (next, out) = eng.step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::Conventional { residual, cov, .. } => {
                assert_abs_diff_eq!(cov[[0, 0]], 2.0, epsilon = 1e-15);
                assert_abs_diff_eq!(residual[0], 2.0, epsilon = 1e-15);
            }
            _ => unreachable!(),
        }
        assert_abs_diff_eq!(next.state[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next.cov[[0, 0]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn theta_independent_model_has_zero_derivatives() {
        let spec = scalar_model(1.0, false);
        let model = evaluate(&spec, &[0.3]).unwrap();
        let eng = Conventional::new(&model).unwrap();
        let mut st = eng.init_sensitivity();
        let u = Vector::<f64>::zeros(1);
        for k in 0..5 {
            let z = Vector::from(vec![0.5 * k as f64]);
            let (next, out) = eng.sensitivity_step(&st, z.view(), u.view()).unwrap();
            match &out.innovations {
                Innovations::Conventional {
                    residual_derivs,
                    cov_derivs,
                    ..
                } => {
                    assert_eq!(residual_derivs[0][0], 0.0);
                    assert_eq!(cov_derivs[0][[0, 0]], 0.0);
                }
                _ => unreachable!(),
            }
            st = next;
        }
    }

    #[test]
    fn scalar_r_theta_sensitivity() {
        // R = theta, H = F = Pi0 = 1: R_e,1 = 1 + theta, dR_e,1/dtheta = 1.
        let spec = scalar_model(0.0, true);
        let model = evaluate(&spec, &[1.0]).unwrap();
        let eng = Conventional::new(&model).unwrap();
        let st = eng.init_sensitivity();
        let z = Vector::from(vec![0.7]);
        let u = Vector::<f64>::zeros(1);
        let (_, out) = eng.sensitivity_step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::Conventional {
                cov, cov_derivs, ..
            } => {
                assert_abs_diff_eq!(cov[[0, 0]], 2.0, epsilon = 1e-12);
                assert_abs_diff_eq!(cov_derivs[0][[0, 0]], 1.0, epsilon = 1e-8);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn benchmark_model_near_machine_delta_breaks_down() {
        // With delta^2 below roundoff relative to the H Pi0 Ht scale, the
        // innovation covariance degenerates within the first steps.
        let spec = families::example3_spec::<f64>(1e-9).unwrap();
        let model = evaluate(&spec, &[1.0]).unwrap();
        let eng = Conventional::new(&model).unwrap();
        let mut st = eng.init();
        let u = Vector::<f64>::zeros(1);
        let mut failed = false;
        for k in 0..8 {
            let z = Vector::from(vec![1.0 + k as f64 * 0.1, 1.0 - k as f64 * 0.1]);
            match eng.step(&st, z.view(), u.view()) {
                Ok((next, _)) => st = next,
                Err(FilterError::InnovationCovSingular) => {
                    failed = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(failed, "conventional engine should fail near machine-epsilon delta");
    }
}
