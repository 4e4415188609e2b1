//! Extended square-root covariance filter (eSRCF).
//!
//! Per step the engine stacks the pre-array
//!
//! ```text
//! [ R^{1/2}      0           −R^{-T/2} zₖ ]   m rows
//! [ P^{1/2}Hᵀ    P^{1/2}Fᵀ    P^{-T/2}x̂ₖ ]   n rows
//! [ 0            Q^{1/2}Gᵀ    0           ]   q rows
//! ```
//!
//! and upper-triangularizes the first `m+n` columns; the innovation factor,
//! normalized gain, next covariance factor, normalized innovation and next
//! normalized state are read straight off the post-array. The sensitivity
//! variant pushes the pre-array derivatives through the same transformation
//! (partition `s = m+n, k = q, l = 1`).
//!
//! The printed arrays take no deterministic input; a nonzero `Buₖ` is
//! folded in afterwards as `P₊^{-T/2}(x̂₊ + Buₖ)` via a triangular solve,
//! which leaves the arrays untouched and is inert when `Bu = 0`.

use ndarray::{s, ArrayView1};

use super::{
    control_product, diff_cholesky, diff_cholesky_psd, inv_transpose_factor, DiffFactor,
    Innovations, StepOutput,
};
use crate::array_sensitivity::{post_derivative_upper, ArrayPartition, DiffMatrix, Differentiated};
use crate::error::FilterError;
use crate::model::{ModelDims, ModelEval};
use crate::triarray::{tri_solve_vec, Orientation, TriSolve, TriangularFactor};
use crate::{Matrix, Scalar, Vector};

/// Square-root covariance state: `P^{1/2}` (upper) and the normalized
/// state `ν = P^{-T/2}x̂`, with their derivatives in sensitivity mode.
///
/// The reconstructed covariance `P = (P^{1/2})ᵀ P^{1/2}` is symmetric
/// positive semidefinite by construction, whatever roundoff does.
#[derive(Debug, Clone)]
pub struct SqrtCovState<T> {
    pub sqrt_cov: TriangularFactor<T>,
    pub normalized_state: Vector<T>,
    pub sqrt_cov_derivs: Vec<Matrix<T>>,
    pub normalized_state_derivs: Vec<Vector<T>>,
}

impl<T: Scalar> SqrtCovState<T> {
    /// Reconstructs `P` from its factor.
    pub fn covariance(&self) -> Matrix<T> {
        self.sqrt_cov.matrix().t().dot(self.sqrt_cov.matrix())
    }

    /// Recovers x̂ from the normalized state (a product, no inversion).
    pub fn state(&self) -> Vector<T> {
        self.sqrt_cov.matrix().t().dot(&self.normalized_state)
    }
}

/// eSRCF engine over a fixed model evaluation.
#[derive(Debug, Clone)]
pub struct Esrcf<T> {
    dims: ModelDims,
    f: DiffMatrix<T>,
    b: DiffMatrix<T>,
    h: DiffMatrix<T>,
    r_factor: DiffFactor<T>,
    /// R^{-T/2} (lower) and derivatives, for the normalized measurement.
    r_inv_t: TriangularFactor<T>,
    r_inv_t_derivs: Vec<Matrix<T>>,
    pi_factor: DiffFactor<T>,
    x0: Differentiated<Vector<T>>,
    /// Q^{1/2}Gᵀ and derivatives, fixed per θ.
    qg: Matrix<T>,
    qg_derivs: Vec<Matrix<T>>,
}

impl<T: Scalar> Esrcf<T> {
    pub fn new(model: &ModelEval<T>) -> Result<Self, FilterError> {
        let r_factor = diff_cholesky(&model.measurement_cov)?;
        let (r_inv_t, r_inv_t_derivs) =
            inv_transpose_factor(&r_factor).map_err(FilterError::Linalg)?;
        let q_factor = diff_cholesky_psd(&model.process_cov)?;
        let pi_factor = diff_cholesky(&model.init_cov)?;

        let g = &model.noise_map;
        let qg = q_factor.factor.matrix().dot(&g.value.t());
        let qg_derivs = (0..model.param_count())
            .map(|i| {
                q_factor.derivs[i].dot(&g.value.t())
                    + q_factor.factor.matrix().dot(&g.derivs[i].t())
            })
            .collect();

        Ok(Esrcf {
            dims: model.dims,
            f: model.state_transition.clone(),
            b: model.input_map.clone(),
            h: model.observation.clone(),
            r_factor,
            r_inv_t,
            r_inv_t_derivs,
            pi_factor,
            x0: model.init_mean.clone(),
            qg,
            qg_derivs,
        })
    }

    /// Initial condition: `P₁|₀^{1/2} = Π₀^{1/2}`, `ν₁ = Π₀^{-T/2}x̄₀`.
    pub fn init(&self) -> Result<SqrtCovState<T>, FilterError> {
        self.init_impl(false)
    }

    pub fn init_sensitivity(&self) -> Result<SqrtCovState<T>, FilterError> {
        self.init_impl(true)
    }

    fn init_impl(&self, sensitivity: bool) -> Result<SqrtCovState<T>, FilterError> {
        let sqrt_cov = self.pi_factor.factor.clone();
        let nu = tri_solve_vec(&sqrt_cov, &self.x0.value, TriSolve::LeftTransposed)?;
        let mut sqrt_cov_derivs = Vec::new();
        let mut nu_derivs = Vec::new();
        if sensitivity {
            for i in 0..self.x0.param_count() {
                let du = &self.pi_factor.derivs[i];
                let rhs = &self.x0.derivs[i] - &du.t().dot(&nu);
                nu_derivs.push(tri_solve_vec(&sqrt_cov, &rhs, TriSolve::LeftTransposed)?);
                sqrt_cov_derivs.push(du.clone());
            }
        }
        Ok(SqrtCovState {
            sqrt_cov,
            normalized_state: nu,
            sqrt_cov_derivs,
            normalized_state_derivs: nu_derivs,
        })
    }

    pub fn step(
        &self,
        state: &SqrtCovState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(SqrtCovState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, false)
    }

    pub fn sensitivity_step(
        &self,
        state: &SqrtCovState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(SqrtCovState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, true)
    }

    fn step_impl(
        &self,
        state: &SqrtCovState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
        sensitivity: bool,
    ) -> Result<(SqrtCovState<T>, StepOutput<T>), FilterError> {
        let ModelDims {
            state_dim: n,
            obs_dim: m,
            noise_dim: q,
            ..
        } = self.dims;
        let sdim = m + n;
        let p_count = if sensitivity { self.f.param_count() } else { 0 };

        let up = state.sqrt_cov.matrix();
        let zv = z.to_owned();

        let mut pre = Matrix::<T>::zeros((m + n + q, sdim + 1));
        pre.slice_mut(s![..m, ..m]).assign(self.r_factor.factor.matrix());
        let neg_norm_z = -self.r_inv_t.matrix().dot(&zv);
        pre.slice_mut(s![..m, sdim]).assign(&neg_norm_z);
        pre.slice_mut(s![m..sdim, ..m]).assign(&up.dot(&self.h.value.t()));
        pre.slice_mut(s![m..sdim, m..sdim]).assign(&up.dot(&self.f.value.t()));
        pre.slice_mut(s![m..sdim, sdim]).assign(&state.normalized_state);
        pre.slice_mut(s![sdim.., m..sdim]).assign(&self.qg);

        let mut derivs = Vec::with_capacity(p_count);
        for i in 0..p_count {
            let dup = &state.sqrt_cov_derivs[i];
            let mut da = Matrix::<T>::zeros((m + n + q, sdim + 1));
            da.slice_mut(s![..m, ..m]).assign(&self.r_factor.derivs[i]);
            da.slice_mut(s![..m, sdim])
                .assign(&(-self.r_inv_t_derivs[i].dot(&zv)));
            da.slice_mut(s![m..sdim, ..m])
                .assign(&(dup.dot(&self.h.value.t()) + up.dot(&self.h.derivs[i].t())));
            da.slice_mut(s![m..sdim, m..sdim])
                .assign(&(dup.dot(&self.f.value.t()) + up.dot(&self.f.derivs[i].t())));
            da.slice_mut(s![m..sdim, sdim])
                .assign(&state.normalized_state_derivs[i]);
            da.slice_mut(s![sdim.., m..sdim]).assign(&self.qg_derivs[i]);
            derivs.push(da);
        }

        let pre = Differentiated::new(pre, derivs);
        let post = post_derivative_upper(&pre, ArrayPartition::new(sdim, q, 1))
            .map_err(FilterError::Linalg)?;
        let arr = post.post();

        let cov_factor = TriangularFactor::from_parts_unchecked(
            arr.slice(s![..m, ..m]).to_owned(),
            Orientation::Upper,
        );
        let normalized_gain = arr.slice(s![..m, m..sdim]).t().to_owned();
        let next_sqrt_cov = TriangularFactor::from_parts_unchecked(
            arr.slice(s![m..sdim, m..sdim]).to_owned(),
            Orientation::Upper,
        );
        let normalized_residual = -arr.slice(s![..m, sdim]).to_owned();
        let mut next_nu = arr.slice(s![m..sdim, sdim]).to_owned();
        let residual_block = arr.slice(s![sdim.., sdim]).to_owned();

        // Deterministic input: ν₊ ← ν₊ + P₊^{-T/2}Buₖ.
        let bu = control_product(&self.b.value, &u);
        let correction = match &bu {
            Some(bu) => {
                let y = tri_solve_vec(&next_sqrt_cov, bu, TriSolve::LeftTransposed)?;
                next_nu = &next_nu + &y;
                Some(y)
            }
            None => None,
        };
        let predicted_state = next_sqrt_cov.matrix().t().dot(&next_nu);

        let mut cov_factor_derivs = Vec::with_capacity(p_count);
        let mut sqrt_cov_derivs = Vec::with_capacity(p_count);
        let mut residual_derivs = Vec::with_capacity(p_count);
        let mut nu_derivs = Vec::with_capacity(p_count);
        let mut predicted_state_derivs = Vec::with_capacity(p_count);
        for i in 0..p_count {
            let dr11 = post.tri_deriv(i);
            let dr12 = post.side_deriv(i);
            let d_cov_factor = dr11.slice(s![..m, ..m]).to_owned();
            let d_sqrt_cov = dr11.slice(s![m.., m..]).to_owned();
            let d_residual = -dr12.slice(s![..m, 0]).to_owned();
            let mut d_nu = dr12.slice(s![m.., 0]).to_owned();
            if let (Some(bu), Some(y)) = (&bu, &correction) {
                let dbu = self.b.derivs[i].dot(&u);
                let _ = bu;
                let rhs = &dbu - &d_sqrt_cov.t().dot(y);
                d_nu = &d_nu + &tri_solve_vec(&next_sqrt_cov, &rhs, TriSolve::LeftTransposed)?;
            }
            predicted_state_derivs
                .push(d_sqrt_cov.t().dot(&next_nu) + next_sqrt_cov.matrix().t().dot(&d_nu));
            cov_factor_derivs.push(d_cov_factor);
            sqrt_cov_derivs.push(d_sqrt_cov);
            residual_derivs.push(d_residual);
            nu_derivs.push(d_nu);
        }

        let out = StepOutput {
            predicted_state,
            predicted_state_derivs,
            innovations: Innovations::SqrtCovariance {
                normalized_residual,
                cov_factor,
                normalized_residual_derivs: residual_derivs,
                cov_factor_derivs,
                normalized_gain,
                residual_block,
            },
        };
        Ok((
            SqrtCovState {
                sqrt_cov: next_sqrt_cov,
                normalized_state: next_nu,
                sqrt_cov_derivs,
                normalized_state_derivs: nu_derivs,
            },
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate, families, DerivativeMode, ModelDims, ModelSpec, SystemMatrices, ValueFn};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn scalar_r_theta() -> ModelSpec<f64> {
        let dims = ModelDims::new(1, 1, 1, 1, 1);
        let values: ValueFn<f64> = Arc::new(|t: &[f64]| {
            Ok(SystemMatrices {
                state_transition: Matrix::<f64>::eye(1),
                input_map: Matrix::<f64>::zeros((1, 1)),
                noise_map: Matrix::<f64>::zeros((1, 1)),
                observation: Matrix::<f64>::eye(1),
                process_cov: Matrix::<f64>::zeros((1, 1)),
                measurement_cov: Matrix::<f64>::eye(1) * t[0],
                init_mean: Vector::<f64>::zeros(1),
                init_cov: Matrix::<f64>::eye(1),
            })
        });
        ModelSpec::new(dims, values, DerivativeMode::FiniteDifference { step: None })
    }

    #[test]
    fn scalar_step_squares_match_conventional() {
        // Same hand case as the conventional engine: R_e,1 = 2, xhat = 1.
        let model = evaluate(&scalar_r_theta(), &[1.0]).unwrap();
        let eng = Esrcf::new(&model).unwrap();
        let st = eng.init().unwrap();
        let z = Vector::from(vec![2.0]);
        let u = Vector::<f64>::zeros(1);
        let (next, out) = eng.step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::SqrtCovariance { cov_factor, .. } => {
                assert_abs_diff_eq!(
                    cov_factor.matrix()[[0, 0]].abs(),
                    2.0f64.sqrt(),
                    epsilon = 1e-12
                );
            }
            _ => unreachable!(),
        }
        assert_abs_diff_eq!(out.predicted_state[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.covariance()[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn scalar_r_theta_factor_derivative() {
        // d sqrt(1+theta)/dtheta at theta=1 is 1/(2 sqrt 2), modulo the
        // factor sign convention.
        let model = evaluate(&scalar_r_theta(), &[1.0]).unwrap();
        let eng = Esrcf::new(&model).unwrap();
        let st = eng.init_sensitivity().unwrap();
        let z = Vector::from(vec![0.3]);
        let u = Vector::<f64>::zeros(1);
        let (_, out) = eng.sensitivity_step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::SqrtCovariance {
                cov_factor,
                cov_factor_derivs,
                ..
            } => {
                let sign = cov_factor.matrix()[[0, 0]].signum();
                let d = cov_factor_derivs[0][[0, 0]] * sign;
                assert_abs_diff_eq!(d, 1.0 / (2.0 * 2.0f64.sqrt()), epsilon = 1e-9);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn theta_independent_model_zero_derivs() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        // Freeze theta inside the matrices by evaluating, then zeroing derivs.
        let mut model = evaluate(&spec, &[2.0]).unwrap();
        for d in model.measurement_cov.derivs.iter_mut() {
            d.fill(0.0);
        }
        for d in model.init_cov.derivs.iter_mut() {
            d.fill(0.0);
        }
        let eng = Esrcf::new(&model).unwrap();
        let mut st = eng.init_sensitivity().unwrap();
        let u = Vector::<f64>::zeros(1);
        for k in 0..4 {
            let z = Vector::from(vec![0.1 * k as f64, -0.2 * k as f64]);
            let (next, out) = eng.sensitivity_step(&st, z.view(), u.view()).unwrap();
            match &out.innovations {
                Innovations::SqrtCovariance {
                    normalized_residual_derivs,
                    cov_factor_derivs,
                    ..
                } => {
                    assert!(normalized_residual_derivs[0].iter().all(|v| v.abs() < 1e-12));
                    assert!(cov_factor_derivs[0].iter().all(|v| v.abs() < 1e-12));
                }
                _ => unreachable!(),
            }
            st = next;
        }
    }

    #[test]
    fn benchmark_survives_small_delta() {
        let spec = families::example3_spec::<f64>(1e-5).unwrap();
        let model = evaluate(&spec, &[1.0]).unwrap();
        let eng = Esrcf::new(&model).unwrap();
        let mut st = eng.init().unwrap();
        let u = Vector::<f64>::zeros(1);
        for k in 0..200 {
            let z = Vector::from(vec![(k as f64 * 0.01).sin(), (k as f64 * 0.02).cos()]);
            let (next, out) = eng.step(&st, z.view(), u.view()).unwrap();
            assert!(out.predicted_state.iter().all(|v| v.is_finite()));
            st = next;
        }
    }
}
