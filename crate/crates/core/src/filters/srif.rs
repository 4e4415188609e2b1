//! Extended square-root information filter (eSRIF).
//!
//! Propagates the inverse covariance factor `P^{-T/2}` (lower triangular)
//! and the normalized state `P^{-T/2}x̂`. Per step the engine assembles
//!
//! ```text
//! [ R^{-T/2}   −R^{-T/2}HF⁻¹         R^{-T/2}HF⁻¹GQ^{T/2}    −R^{-T/2}zₖ ]  m rows
//! [ 0           P^{-T/2}F⁻¹         −P^{-T/2}F⁻¹GQ^{T/2}     P^{-T/2}x̂ₖ ]  n rows
//! [ 0           0                    I                        0           ]  q rows
//! ```
//!
//! and lower-triangularizes the first `m+n+q` columns (partition
//! `s = m+n+q, k = 0, l = 1`), reading off `R_{e,k}^{-T/2}`, `−ēₖ`,
//! `P₊^{-T/2}` and `P₊^{-T/2}x̂₊`. Requires an invertible state transition;
//! the engine refuses a singular `F` rather than regularizing it.
//!
//! A nonzero `Buₖ` is folded in afterwards as a direct product
//! `ν₊ ← ν₊ + P₊^{-T/2}Buₖ`; the predicted state itself is recovered on
//! demand by one triangular solve.

use ndarray::{s, ArrayView1};

use super::{
    control_product, diff_cholesky, diff_cholesky_psd, inv_transpose_factor, Innovations,
    StepOutput,
};
use crate::array_sensitivity::{post_derivative_lower, ArrayPartition, DiffMatrix, Differentiated};
use crate::error::{FilterError, LinalgError};
use crate::model::{ModelDims, ModelEval};
use crate::triarray::{invert, tri_solve_vec, Orientation, TriSolve, TriangularFactor};
use crate::{Matrix, Scalar, Vector};

/// Inverse-factor state: `P^{-T/2}` (lower, nonsingular) and
/// `ν = P^{-T/2}x̂`, with derivatives in sensitivity mode.
#[derive(Debug, Clone)]
pub struct SqrtInfoState<T> {
    pub inv_sqrt_cov: TriangularFactor<T>,
    pub normalized_state: Vector<T>,
    pub inv_sqrt_cov_derivs: Vec<Matrix<T>>,
    pub normalized_state_derivs: Vec<Vector<T>>,
}

impl<T: Scalar> SqrtInfoState<T> {
    /// Recovers x̂ by solving the triangular system `P^{-T/2} x̂ = ν`.
    pub fn state(&self) -> Result<Vector<T>, LinalgError> {
        tri_solve_vec(&self.inv_sqrt_cov, &self.normalized_state, TriSolve::Left)
    }
}

/// eSRIF engine over a fixed model evaluation.
#[derive(Debug, Clone)]
pub struct Esrif<T> {
    dims: ModelDims,
    b: DiffMatrix<T>,
    f_inv: Matrix<T>,
    f_inv_derivs: Vec<Matrix<T>>,
    /// R^{-T/2} (lower) and derivatives.
    r_inv_t: TriangularFactor<T>,
    r_inv_t_derivs: Vec<Matrix<T>>,
    /// Π₀^{-T/2} (lower) and derivatives.
    pi_inv_t: TriangularFactor<T>,
    pi_inv_t_derivs: Vec<Matrix<T>>,
    x0: Differentiated<Vector<T>>,
    g: DiffMatrix<T>,
    /// Q^{T/2} (lower) and derivatives.
    q_t: Matrix<T>,
    q_t_derivs: Vec<Matrix<T>>,
    /// W = R^{-T/2}HF⁻¹ and W·G·Q^{T/2}, fixed per θ.
    w: Matrix<T>,
    w_derivs: Vec<Matrix<T>>,
    wgq: Matrix<T>,
    wgq_derivs: Vec<Matrix<T>>,
}

impl<T: Scalar> Esrif<T> {
    pub fn new(model: &ModelEval<T>) -> Result<Self, FilterError> {
        let f = &model.state_transition;
        let f_inv = match invert(&f.value) {
            Ok(fi) => fi,
            Err(LinalgError::SingularMatrix) => return Err(FilterError::SingularStateTransition),
            Err(e) => return Err(FilterError::Linalg(e)),
        };
        let f_inv_derivs: Vec<Matrix<T>> = f
            .derivs
            .iter()
            .map(|df| -f_inv.dot(df).dot(&f_inv))
            .collect();

        let r_factor = diff_cholesky(&model.measurement_cov)?;
        let (r_inv_t, r_inv_t_derivs) =
            inv_transpose_factor(&r_factor).map_err(FilterError::Linalg)?;
        let pi_factor = diff_cholesky(&model.init_cov)?;
        let (pi_inv_t, pi_inv_t_derivs) =
            inv_transpose_factor(&pi_factor).map_err(FilterError::Linalg)?;
        let q_factor = diff_cholesky_psd(&model.process_cov)?;
        let q_t = q_factor.factor.matrix().t().to_owned();
        let q_t_derivs: Vec<Matrix<T>> =
            q_factor.derivs.iter().map(|d| d.t().to_owned()).collect();

        let h = &model.observation;
        let w = r_inv_t.matrix().dot(&h.value).dot(&f_inv);
        let w_derivs: Vec<Matrix<T>> = (0..model.param_count())
            .map(|i| {
                r_inv_t_derivs[i].dot(&h.value).dot(&f_inv)
                    + r_inv_t.matrix().dot(&h.derivs[i]).dot(&f_inv)
                    + r_inv_t.matrix().dot(&h.value).dot(&f_inv_derivs[i])
            })
            .collect();
        let g = &model.noise_map;
        let wgq = w.dot(&g.value).dot(&q_t);
        let wgq_derivs = (0..model.param_count())
            .map(|i| {
                w_derivs[i].dot(&g.value).dot(&q_t)
                    + w.dot(&g.derivs[i]).dot(&q_t)
                    + w.dot(&g.value).dot(&q_t_derivs[i])
            })
            .collect();

        Ok(Esrif {
            dims: model.dims,
            b: model.input_map.clone(),
            f_inv,
            f_inv_derivs,
            r_inv_t,
            r_inv_t_derivs,
            pi_inv_t,
            pi_inv_t_derivs,
            x0: model.init_mean.clone(),
            g: model.noise_map.clone(),
            q_t,
            q_t_derivs,
            w,
            w_derivs,
            wgq,
            wgq_derivs,
        })
    }

    /// Initial condition: `P₁|₀^{-T/2} = Π₀^{-T/2}`, `ν₁ = Π₀^{-T/2}x̄₀`.
    pub fn init(&self) -> Result<SqrtInfoState<T>, FilterError> {
        self.init_impl(false)
    }

    pub fn init_sensitivity(&self) -> Result<SqrtInfoState<T>, FilterError> {
        self.init_impl(true)
    }

    fn init_impl(&self, sensitivity: bool) -> Result<SqrtInfoState<T>, FilterError> {
        let sp = self.pi_inv_t.clone();
        let nu = sp.matrix().dot(&self.x0.value);
        let mut sp_derivs = Vec::new();
        let mut nu_derivs = Vec::new();
        if sensitivity {
            for i in 0..self.x0.param_count() {
                let dsp = self.pi_inv_t_derivs[i].clone();
                nu_derivs.push(dsp.dot(&self.x0.value) + sp.matrix().dot(&self.x0.derivs[i]));
                sp_derivs.push(dsp);
            }
        }
        Ok(SqrtInfoState {
            inv_sqrt_cov: sp,
            normalized_state: nu,
            inv_sqrt_cov_derivs: sp_derivs,
            normalized_state_derivs: nu_derivs,
        })
    }

    pub fn step(
        &self,
        state: &SqrtInfoState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(SqrtInfoState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, false)
    }

    pub fn sensitivity_step(
        &self,
        state: &SqrtInfoState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
    ) -> Result<(SqrtInfoState<T>, StepOutput<T>), FilterError> {
        self.step_impl(state, z, u, true)
    }

    fn step_impl(
        &self,
        state: &SqrtInfoState<T>,
        z: ArrayView1<T>,
        u: ArrayView1<T>,
        sensitivity: bool,
    ) -> Result<(SqrtInfoState<T>, StepOutput<T>), FilterError> {
        let ModelDims {
            state_dim: n,
            obs_dim: m,
            noise_dim: q,
            ..
        } = self.dims;
        let sdim = m + n + q;
        let p_count = if sensitivity { self.x0.param_count() } else { 0 };

        let sp = state.inv_sqrt_cov.matrix();
        let zv = z.to_owned();
        let sp_fi = sp.dot(&self.f_inv);
        let sp_fi_g = sp_fi.dot(&self.g.value);

        let mut pre = Matrix::<T>::zeros((sdim, sdim + 1));
        pre.slice_mut(s![..m, ..m]).assign(self.r_inv_t.matrix());
        pre.slice_mut(s![..m, m..m + n]).assign(&(-&self.w));
        pre.slice_mut(s![..m, m + n..sdim]).assign(&self.wgq);
        pre.slice_mut(s![..m, sdim]).assign(&(-self.r_inv_t.matrix().dot(&zv)));
        pre.slice_mut(s![m..m + n, m..m + n]).assign(&sp_fi);
        pre.slice_mut(s![m..m + n, m + n..sdim])
            .assign(&(-sp_fi_g.dot(&self.q_t)));
        pre.slice_mut(s![m..m + n, sdim]).assign(&state.normalized_state);
        pre.slice_mut(s![m + n.., m + n..sdim]).assign(&Matrix::<T>::eye(q));

        let mut derivs = Vec::with_capacity(p_count);
        for i in 0..p_count {
            let dsp = &state.inv_sqrt_cov_derivs[i];
            let d_sp_fi = dsp.dot(&self.f_inv) + sp.dot(&self.f_inv_derivs[i]);
            let d_block23 = d_sp_fi.dot(&self.g.value).dot(&self.q_t)
                + sp_fi.dot(&self.g.derivs[i]).dot(&self.q_t)
                + sp_fi_g.dot(&self.q_t_derivs[i]);
            let mut da = Matrix::<T>::zeros((sdim, sdim + 1));
            da.slice_mut(s![..m, ..m]).assign(&self.r_inv_t_derivs[i]);
            da.slice_mut(s![..m, m..m + n]).assign(&(-&self.w_derivs[i]));
            da.slice_mut(s![..m, m + n..sdim]).assign(&self.wgq_derivs[i]);
            da.slice_mut(s![..m, sdim])
                .assign(&(-self.r_inv_t_derivs[i].dot(&zv)));
            da.slice_mut(s![m..m + n, m..m + n]).assign(&d_sp_fi);
            da.slice_mut(s![m..m + n, m + n..sdim]).assign(&(-d_block23));
            da.slice_mut(s![m..m + n, sdim])
                .assign(&state.normalized_state_derivs[i]);
            derivs.push(da);
        }

        let pre = Differentiated::new(pre, derivs);
        let post = post_derivative_lower(&pre, ArrayPartition::new(sdim, 0, 1))
            .map_err(FilterError::Linalg)?;
        let arr = post.post();

        let inv_cov_factor = TriangularFactor::from_parts_unchecked(
            arr.slice(s![..m, ..m]).to_owned(),
            Orientation::Lower,
        );
        let next_sp = TriangularFactor::from_parts_unchecked(
            arr.slice(s![m..m + n, m..m + n]).to_owned(),
            Orientation::Lower,
        );
        let normalized_residual = -arr.slice(s![..m, sdim]).to_owned();
        let mut next_nu = arr.slice(s![m..m + n, sdim]).to_owned();
        let residual_rows = arr.slice(s![m + n.., ..]).to_owned();

        let bu = control_product(&self.b.value, &u);
        if let Some(bu) = &bu {
            next_nu = &next_nu + &next_sp.matrix().dot(bu);
        }
        let predicted_state = tri_solve_vec(&next_sp, &next_nu, TriSolve::Left)?;

        let mut inv_cov_factor_derivs = Vec::with_capacity(p_count);
        let mut sp_derivs = Vec::with_capacity(p_count);
        let mut residual_derivs = Vec::with_capacity(p_count);
        let mut nu_derivs = Vec::with_capacity(p_count);
        let mut predicted_state_derivs = Vec::with_capacity(p_count);
        for i in 0..p_count {
            let dl21 = post.tri_deriv(i);
            let dl22 = post.side_deriv(i);
            let d_inv_cov = dl21.slice(s![..m, ..m]).to_owned();
            let d_sp = dl21.slice(s![m..m + n, m..m + n]).to_owned();
            let d_residual = -dl22.slice(s![..m, 0]).to_owned();
            let mut d_nu = dl22.slice(s![m..m + n, 0]).to_owned();
            if let Some(bu) = &bu {
                let dbu = self.b.derivs[i].dot(&u);
                d_nu = d_nu + d_sp.dot(bu) + next_sp.matrix().dot(&dbu);
            }
            // From P^{-T/2} x̂ = ν: dx̂ = P^{T/2}(dν − dP^{-T/2} x̂).
            let rhs = &d_nu - &d_sp.dot(&predicted_state);
            predicted_state_derivs.push(tri_solve_vec(&next_sp, &rhs, TriSolve::Left)?);
            inv_cov_factor_derivs.push(d_inv_cov);
            sp_derivs.push(d_sp);
            residual_derivs.push(d_residual);
            nu_derivs.push(d_nu);
        }

        let out = StepOutput {
            predicted_state,
            predicted_state_derivs,
            innovations: Innovations::SqrtInformation {
                normalized_residual,
                inv_cov_factor,
                normalized_residual_derivs: residual_derivs,
                inv_cov_factor_derivs,
                residual_rows,
            },
        };
        Ok((
            SqrtInfoState {
                inv_sqrt_cov: next_sp,
                normalized_state: next_nu,
                inv_sqrt_cov_derivs: sp_derivs,
                normalized_state_derivs: nu_derivs,
            },
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        evaluate, families, DerivativeMode, ModelDims, ModelSpec, SystemMatrices, ValueFn,
    };
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
                process_cov: Matrix::<f64>::eye(1) * 1e-12,
                measurement_cov: Matrix::<f64>::eye(1) * t[0],
                init_mean: Vector::<f64>::zeros(1),
                init_cov: Matrix::<f64>::eye(1),
            })
        });
        ModelSpec::new(dims, values, DerivativeMode::FiniteDifference { step: None })
    }

    #[test]
    fn scalar_step_matches_hand_values() {
        let model = evaluate(&scalar_r_theta(), &[1.0]).unwrap();
        let eng = Esrif::new(&model).unwrap();
        let st = eng.init().unwrap();
        let z = Vector::from(vec![2.0]);
        let u = Vector::<f64>::zeros(1);
        let (_, out) = eng.step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::SqrtInformation { inv_cov_factor, .. } => {
                assert_abs_diff_eq!(
                    inv_cov_factor.matrix()[[0, 0]].abs(),
                    1.0 / 2.0f64.sqrt(),
                    epsilon = 1e-9
                );
            }
            _ => unreachable!(),
        }
        assert_abs_diff_eq!(out.predicted_state[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn scalar_inverse_factor_derivative() {
        // d (1+theta)^{-1/2} / dtheta at theta=1 -> -(1+theta)^{-3/2}/2.
        let model = evaluate(&scalar_r_theta(), &[1.0]).unwrap();
        let eng = Esrif::new(&model).unwrap();
        let st = eng.init_sensitivity().unwrap();
        let z = Vector::from(vec![0.4]);
        let u = Vector::<f64>::zeros(1);
        let (_, out) = eng.sensitivity_step(&st, z.view(), u.view()).unwrap();
        match &out.innovations {
            Innovations::SqrtInformation {
                inv_cov_factor,
                inv_cov_factor_derivs,
                ..
            } => {
                let sign = inv_cov_factor.matrix()[[0, 0]].signum();
                let d = inv_cov_factor_derivs[0][[0, 0]] * sign;
                let expect = -0.5 * 2.0f64.powf(-1.5);
                assert_abs_diff_eq!(d, expect, epsilon = 1e-7);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn refuses_singular_state_transition() {
        let spec = families::twostate_spec::<f64>(0.0);
        let model = evaluate(&spec, &[0.0, 0.0]).unwrap();
        assert!(matches!(
            Esrif::new(&model),
            Err(FilterError::SingularStateTransition)
        ));
    }

    #[test]
    fn benchmark_survives_small_delta() {
        let spec = families::example3_spec::<f64>(1e-5).unwrap();
        let model = evaluate(&spec, &[1.0]).unwrap();
        let eng = Esrif::new(&model).unwrap();
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
