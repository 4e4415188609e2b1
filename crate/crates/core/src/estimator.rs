//! Gradient-based maximum-likelihood parameter estimation.
//!
//! [`evaluate_pi`] runs one sensitivity-augmented filter pass over a
//! measurement record and returns the negative log-likelihood μ(θ) and its
//! exact gradient. [`estimate`] iterates
//!
//! ```text
//! θₙ = θₙ₋₁ − γₙ·∇μ(θₙ₋₁)
//! ```
//!
//! with a backtracking line search (Armijo sufficient decrease plus an
//! optional slack ε), projection onto box bounds, and a per-iteration cap
//! on the step infinity-norm. Line-search trials cost one plain filter
//! pass; each accepted iterate costs one sensitivity pass, whose value is
//! bitwise identical to the trial's.
//!
//! Any filter failure — during a trial or a gradient evaluation — is
//! terminal for the run: a broken filter invalidates the index and
//! everything derived from it, so the run records the failing step and
//! stops rather than steering around the breakage. The caller's harness
//! (and the benchmark sweep) carries on with other runs.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{EstimateError, FilterError};
use crate::filters::{Conventional, EngineKind, Esrcf, Esrif, StepOutput};
use crate::io::{fmt_scalar, write_meta_lines, FileMeta};
use crate::likelihood::{NegLogLikelihood, PiAccumulator};
use crate::model::{evaluate, MeasurementLog, ModelSpec};
use crate::{Scalar, Vector};

/// Step-size rule for the descent iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum StepRule<T> {
    /// Constant step size; every step is taken as-is.
    Fixed { gamma: T },
    /// Backtracking from `gamma0`, multiplying by `shrink` until the trial
    /// satisfies `μ' ≤ μ + slack + c·∇μᵀΔθ` (Armijo, c = 1e-4).
    Backtracking { gamma0: T, shrink: T, slack: T },
}

/// Search direction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionRule {
    SteepestDescent,
    /// One-pair (memoryless) BFGS direction built from the previous step
    /// and gradient change; falls back to steepest descent when the
    /// curvature pair is unusable.
    MemorylessBfgs,
}

/// Configuration of [`estimate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig<T> {
    pub engine: EngineKind,
    pub theta0: Vec<T>,
    pub step_rule: StepRule<T>,
    pub direction: DirectionRule,
    pub max_iters: usize,
    /// Stop when `‖∇μ‖ ≤ grad_tol_factor·max(1, |μ|)`.
    pub grad_tol_factor: T,
    /// Stop when `‖Δθ‖_∞ ≤ theta_tol`.
    pub theta_tol: T,
    /// Per-iteration cap on `‖Δθ‖_∞` under backtracking.
    pub max_step: T,
    /// Box bounds; falls back to the model family's bounds when `None`.
    pub bounds: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn new(engine: EngineKind, theta0: Vec<T>) -> Self {
        OptimizerConfig {
            engine,
            theta0,
            step_rule: StepRule::Backtracking {
                gamma0: T::one(),
                shrink: crate::from_f64(0.5),
                slack: T::zero(),
            },
            direction: DirectionRule::SteepestDescent,
            max_iters: 200,
            grad_tol_factor: crate::from_f64(1e-6),
            theta_tol: crate::from_f64(1e-8),
            max_step: crate::from_f64(10.0),
            bounds: None,
        }
    }

    fn validate(&self) -> Result<(), EstimateError> {
        let bad = |msg: &str| {
            EstimateError::new(
                0,
                FilterError::Model(crate::error::ModelError::Domain(msg.into())),
            )
        };
        match self.step_rule {
            StepRule::Fixed { gamma } => {
                if !(gamma > T::zero()) {
                    return Err(bad("fixed step size must be > 0"));
                }
            }
            StepRule::Backtracking {
                gamma0,
                shrink,
                slack,
            } => {
                if !(gamma0 > T::zero()) || !(shrink > T::zero() && shrink < T::one()) {
                    return Err(bad("backtracking needs gamma0 > 0 and 0 < shrink < 1"));
                }
                if slack < T::zero() {
                    return Err(bad("backtracking slack must be >= 0"));
                }
            }
        }
        if !(self.grad_tol_factor > T::zero()) || !(self.theta_tol > T::zero()) {
            return Err(bad("tolerances must be > 0"));
        }
        if !(self.max_step > T::zero()) {
            return Err(bad("max_step must be > 0"));
        }
        Ok(())
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "reason")]
pub enum Termination {
    GradTol,
    ThetaTol,
    MaxIters,
    FilterFailure { step: usize, cause: String },
}

/// One optimizer iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord<T> {
    pub iteration: usize,
    pub theta: Vec<T>,
    pub value: T,
    pub grad_norm: T,
    pub gamma: T,
}

/// Result of an estimation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult<T> {
    pub theta_hat: Vec<T>,
    pub trace: Vec<IterateRecord<T>>,
    pub termination: Termination,
    /// Predicted-state trajectory x̂ₖ₊₁|ₖ at θ̂ (absent if the filter
    /// cannot complete a pass there).
    pub final_states: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> EstimationResult<T> {
    /// Iterate-trace CSV: `n,theta_1..p,mu,gradnorm,gamma`.
    pub fn write_trace_csv<W: Write>(&self, w: &mut W, meta: &FileMeta) -> std::io::Result<()> {
        write_meta_lines(w, meta, &[])?;
        let p = self.theta_hat.len();
        let mut header = String::from("n");
        for j in 1..=p {
            header.push_str(&format!(",theta_{j}"));
        }
        header.push_str(",mu,gradnorm,gamma");
        writeln!(w, "{header}")?;
        for row in &self.trace {
            let mut line = format!("{}", row.iteration);
            for t in &row.theta {
                line.push(',');
                line.push_str(&fmt_scalar(*t));
            }
            line.push(',');
            line.push_str(&fmt_scalar(row.value));
            line.push(',');
            line.push_str(&fmt_scalar(row.grad_norm));
            line.push(',');
            line.push_str(&fmt_scalar(row.gamma));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Runs one full filter pass, feeding every step into `sink`.
fn run_pass<T: Scalar>(
    engine: EngineKind,
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    sensitivity: bool,
    mut sink: impl FnMut(usize, StepOutput<T>) -> Result<(), FilterError>,
) -> Result<(), EstimateError> {
    let model =
        evaluate(spec, theta).map_err(|e| EstimateError::new(0, FilterError::Model(e)))?;
    if data.obs_dim() != model.dims.obs_dim || data.input_dim() != model.dims.input_dim {
        return Err(EstimateError::new(
            0,
            FilterError::Model(crate::error::ModelError::Dimension(format!(
                "data has m={}, d={}, model expects m={}, d={}",
                data.obs_dim(),
                data.input_dim(),
                model.dims.obs_dim,
                model.dims.input_dim
            ))),
        ));
    }
    let n = data.samples();
    macro_rules! drive {
        ($engine:expr, $init:expr, $step:ident) => {{
            let eng = $engine;
            let mut st = $init(&eng)?;
            for k in 1..=n {
                let (next, out) = eng
                    .$step(&st, data.measurement(k), data.input(k))
                    .map_err(|e| EstimateError::new(k, e))?;
                sink(k, out).map_err(|e| EstimateError::new(k, e))?;
                st = next;
            }
        }};
    }
    let at_init = |e: FilterError| EstimateError::new(0, e);
    match (engine, sensitivity) {
        (EngineKind::Conventional, false) => {
            drive!(
                Conventional::new(&model).map_err(at_init)?,
                |e: &Conventional<T>| Ok::<_, EstimateError>(e.init()),
                step
            )
        }
        (EngineKind::Conventional, true) => {
            drive!(
                Conventional::new(&model).map_err(at_init)?,
                |e: &Conventional<T>| Ok::<_, EstimateError>(e.init_sensitivity()),
                sensitivity_step
            )
        }
        (EngineKind::Esrcf, false) => {
            drive!(
                Esrcf::new(&model).map_err(at_init)?,
                |e: &Esrcf<T>| e.init().map_err(at_init),
                step
            )
        }
        (EngineKind::Esrcf, true) => {
            drive!(
                Esrcf::new(&model).map_err(at_init)?,
                |e: &Esrcf<T>| e.init_sensitivity().map_err(at_init),
                sensitivity_step
            )
        }
        (EngineKind::Esrif, false) => {
            drive!(
                Esrif::new(&model).map_err(at_init)?,
                |e: &Esrif<T>| e.init().map_err(at_init),
                step
            )
        }
        (EngineKind::Esrif, true) => {
            drive!(
                Esrif::new(&model).map_err(at_init)?,
                |e: &Esrif<T>| e.init_sensitivity().map_err(at_init),
                sensitivity_step
            )
        }
    }
    Ok(())
}

/// One sensitivity-augmented filter pass: μ(θ) and ∇μ(θ).
pub fn evaluate_pi<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    engine: EngineKind,
) -> Result<NegLogLikelihood<T>, EstimateError> {
    let mut acc = PiAccumulator::new(spec.dims().param_dim);
    run_pass(engine, spec, data, theta, true, |_, out| acc.add_step(&out))?;
    acc.finish().map_err(|e| EstimateError::new(data.samples(), e))
}

/// Value-only pass used by line-search trials.
pub fn evaluate_pi_value<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    engine: EngineKind,
) -> Result<T, EstimateError> {
    let mut acc = PiAccumulator::new(0);
    run_pass(engine, spec, data, theta, false, |_, out| acc.add_step(&out))?;
    Ok(acc
        .finish()
        .map_err(|e| EstimateError::new(data.samples(), e))?
        .value)
}

/// Predicted-state trajectory from a plain pass at θ.
pub fn state_trajectory<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    engine: EngineKind,
) -> Result<Vec<Vector<T>>, EstimateError> {
    let mut states = Vec::with_capacity(data.samples());
    run_pass(engine, spec, data, theta, false, |_, out| {
        states.push(out.predicted_state);
        Ok(())
    })?;
    Ok(states)
}

fn clamp_theta<T: Scalar>(theta: &mut [T], bounds: Option<(&[T], &[T])>) {
    if let Some((lo, hi)) = bounds {
        for ((t, l), h) in theta.iter_mut().zip(lo).zip(hi) {
            if *t < *l {
                *t = *l;
            }
            if *t > *h {
                *t = *h;
            }
        }
    }
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Memoryless BFGS direction from the most recent `(s, y)` pair.
fn bfgs_direction<T: Scalar>(grad: &[T], pair: &Option<(Vec<T>, Vec<T>)>) -> Vec<T> {
    let fallback = || grad.iter().map(|g| -*g).collect::<Vec<T>>();
    let Some((s, y)) = pair else {
        return fallback();
    };
    let sy = s.iter().zip(y).map(|(a, b)| *a * *b).sum::<T>();
    let yy = y.iter().map(|v| *v * *v).sum::<T>();
    let floor = T::epsilon() * norm2(s) * norm2(y);
    if !(sy > floor) || !(yy > T::zero()) {
        return fallback();
    }
    let rho = sy.recip();
    let alpha = rho * s.iter().zip(grad).map(|(a, b)| *a * *b).sum::<T>();
    let q: Vec<T> = grad.iter().zip(y).map(|(g, yi)| *g - alpha * *yi).collect();
    let h0 = sy / yy;
    let mut r: Vec<T> = q.iter().map(|v| h0 * *v).collect();
    let beta = rho * y.iter().zip(&r).map(|(a, b)| *a * *b).sum::<T>();
    for (ri, si) in r.iter_mut().zip(s) {
        *ri += (alpha - beta) * *si;
    }
    r.iter().map(|v| -*v).collect()
}

/// Runs the descent iteration on a measurement record.
pub fn estimate<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    config: &OptimizerConfig<T>,
) -> EstimationResult<T> {
    match estimate_inner(spec, data, config) {
        Ok(result) => result,
        Err((theta, trace, err)) => EstimationResult {
            theta_hat: theta,
            trace,
            termination: Termination::FilterFailure {
                step: err.step,
                cause: err.source.to_string(),
            },
            final_states: None,
        },
    }
}

type Failed<T> = (Vec<T>, Vec<IterateRecord<T>>, EstimateError);

fn estimate_inner<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    config: &OptimizerConfig<T>,
) -> Result<EstimationResult<T>, Failed<T>> {
    let armijo = crate::from_f64::<T>(1e-4);
    let gamma_min = crate::from_f64::<T>(1e-18);

    let owned_bounds = config.bounds.clone();
    let bounds = owned_bounds
        .as_ref()
        .map(|(l, u)| (l.as_slice(), u.as_slice()))
        .or_else(|| spec.bounds());

    let mut theta = config.theta0.clone();
    if let Err(e) = config.validate() {
        return Err((theta, Vec::new(), e));
    }
    clamp_theta(&mut theta, bounds);

    let mut trace: Vec<IterateRecord<T>> = Vec::new();
    let nll = match evaluate_pi(spec, data, &theta, config.engine) {
        Ok(n) => n,
        Err(e) => return Err((theta, trace, e)),
    };
    let mut value = nll.value;
    let mut grad = nll.gradient;
    trace.push(IterateRecord {
        iteration: 0,
        theta: theta.clone(),
        value,
        grad_norm: norm2(&grad),
        gamma: T::zero(),
    });

    let mut pair: Option<(Vec<T>, Vec<T>)> = None;
    let mut termination = Termination::MaxIters;

    for iteration in 1..=config.max_iters {
        let grad_norm = norm2(&grad);
        if grad_norm <= config.grad_tol_factor * T::one().max(value.abs()) {
            termination = Termination::GradTol;
            break;
        }

        let mut direction = match config.direction {
            DirectionRule::SteepestDescent => grad.iter().map(|g| -*g).collect::<Vec<T>>(),
            DirectionRule::MemorylessBfgs => bfgs_direction(&grad, &pair),
        };
        let slope = grad
            .iter()
            .zip(&direction)
            .map(|(g, d)| *g * *d)
            .sum::<T>();
        if !(slope < T::zero()) {
            direction = grad.iter().map(|g| -*g).collect();
        }

        let trial = |gamma: T, cap: bool| -> Vec<T> {
            let mut step: Vec<T> = direction.iter().map(|d| *d * gamma).collect();
            if cap {
                let inf = step.iter().fold(T::zero(), |a, v| a.max(v.abs()));
                if inf > config.max_step {
                    let scale = config.max_step / inf;
                    for s in step.iter_mut() {
                        *s *= scale;
                    }
                }
            }
            let mut t: Vec<T> = theta.iter().zip(&step).map(|(a, b)| *a + *b).collect();
            clamp_theta(&mut t, bounds);
            t
        };

        let (next_theta, accepted_gamma) = match config.step_rule {
            StepRule::Fixed { gamma } => (trial(gamma, false), gamma),
            StepRule::Backtracking {
                gamma0,
                shrink,
                slack,
            } => {
                let mut gamma = gamma0;
                let mut chosen = None;
                while gamma > gamma_min {
                    let cand = trial(gamma, true);
                    let trial_value = match evaluate_pi_value(spec, data, &cand, config.engine) {
                        Ok(v) => v,
                        Err(e) => return Err((theta, trace, e)),
                    };
                    let predicted = grad
                        .iter()
                        .zip(cand.iter().zip(&theta))
                        .map(|(g, (c, t))| *g * (*c - *t))
                        .sum::<T>();
                    if trial_value.is_finite() && trial_value <= value + slack + armijo * predicted
                    {
                        chosen = Some((cand, gamma));
                        break;
                    }
                    gamma = gamma * shrink;
                }
                match chosen {
                    Some(c) => c,
                    None => {
                        termination = Termination::ThetaTol;
                        break;
                    }
                }
            }
        };

        let step_inf = next_theta
            .iter()
            .zip(&theta)
            .fold(T::zero(), |a, (n, t)| a.max((*n - *t).abs()));
        let prev_grad = grad.clone();
        theta = next_theta;
        let nll = match evaluate_pi(spec, data, &theta, config.engine) {
            Ok(n) => n,
            Err(e) => return Err((theta, trace, e)),
        };
        value = nll.value;
        grad = nll.gradient;

        trace.push(IterateRecord {
            iteration,
            theta: theta.clone(),
            value,
            grad_norm: norm2(&grad),
            gamma: accepted_gamma,
        });
        pair = Some((
            trace[trace.len() - 1]
                .theta
                .iter()
                .zip(&trace[trace.len() - 2].theta)
                .map(|(a, b)| *a - *b)
                .collect(),
            grad.iter().zip(&prev_grad).map(|(a, b)| *a - *b).collect(),
        ));

        if step_inf <= config.theta_tol {
            termination = Termination::ThetaTol;
            break;
        }
    }

    let final_states = state_trajectory(spec, data, &theta, config.engine)
        .ok()
        .map(|states| states.into_iter().map(|s| s.to_vec()).collect());
    Ok(EstimationResult {
        theta_hat: theta,
        trace,
        termination,
        final_states,
    })
}

/// Analytic-vs-finite-difference gradient comparison of μ(θ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport<T> {
    pub theta: Vec<T>,
    pub analytic: Vec<T>,
    pub finite_difference: Vec<T>,
    /// `|analytic − fd| / max(1, |fd|)` per parameter.
    pub rel_errors: Vec<T>,
    pub max_rel_error: T,
}

/// Central finite differences of μ(θ) through value-only filter passes,
/// step `h = ε^{1/3}·max(1, |θᵢ|)`.
pub fn fd_gradient<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    engine: EngineKind,
) -> Result<Vec<T>, EstimateError> {
    let cbrt_eps = T::epsilon().powf(crate::from_f64(1.0 / 3.0));
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = cbrt_eps * T::one().max(theta[i].abs());
        let mut tp = theta.to_vec();
        tp[i] += h;
        let mut tm = theta.to_vec();
        tm[i] -= h;
        let plus = evaluate_pi_value(spec, data, &tp, engine)?;
        let minus = evaluate_pi_value(spec, data, &tm, engine)?;
        grad.push((plus - minus) / (crate::from_f64::<T>(2.0) * h));
    }
    Ok(grad)
}

/// Runs the gradient consistency check at θ.
pub fn gradient_check<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &MeasurementLog<T>,
    theta: &[T],
    engine: EngineKind,
) -> Result<GradCheckReport<T>, EstimateError> {
    let analytic = evaluate_pi(spec, data, theta, engine)?.gradient;
    let fd = fd_gradient(spec, data, theta, engine)?;
    let rel_errors: Vec<T> = analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (*a - *f).abs() / T::one().max(f.abs()))
        .collect();
    let max_rel_error = rel_errors.iter().fold(T::zero(), |a, v| a.max(*v));
    Ok(GradCheckReport {
        theta: theta.to_vec(),
        analytic,
        finite_difference: fd,
        rel_errors,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{families, simulate};
    use approx::assert_abs_diff_eq;

    #[test]
    fn pi_ordering_at_true_parameter() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let data = simulate(&spec, &[5.0], 120, 9, None).unwrap();
        let at_true = evaluate_pi(&spec, &data, &[5.0], EngineKind::Esrcf).unwrap();
        let at_wrong = evaluate_pi(&spec, &data, &[1.0], EngineKind::Esrcf).unwrap();
        assert!(at_true.value < at_wrong.value);
    }

    #[test]
    fn gradient_matches_fd_on_benchmark() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let data = simulate(&spec, &[5.0], 60, 33, None).unwrap();
        for engine in EngineKind::ALL {
            let report = gradient_check(&spec, &data, &[2.5], engine).unwrap();
            assert!(
                report.max_rel_error <= 1e-6,
                "{engine}: {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn estimate_recovers_benchmark_parameter() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let data = simulate(&spec, &[5.0], 250, 1003, None).unwrap();
        let config = OptimizerConfig::new(EngineKind::Esrcf, vec![1.0]);
        let result = estimate(&spec, &data, &config);
        assert!(
            matches!(result.termination, Termination::GradTol | Termination::ThetaTol),
            "termination {:?}",
            result.termination
        );
        assert!((result.theta_hat[0] - 5.0).abs() <= 0.5, "{}", result.theta_hat[0]);
        assert!(result.final_states.is_some());
        // Descent: the value trace never increases under zero slack.
        for w in result.trace.windows(2) {
            assert!(w[1].value <= w[0].value + 1e-12);
        }
    }

    #[test]
    fn estimates_agree_across_square_root_engines() {
        let spec = families::example3_spec::<f64>(1e-3).unwrap();
        let data = simulate(&spec, &[5.0], 200, 77, None).unwrap();
        let a = estimate(&spec, &data, &OptimizerConfig::new(EngineKind::Esrcf, vec![1.0]));
        let b = estimate(&spec, &data, &OptimizerConfig::new(EngineKind::Esrif, vec![1.0]));
        assert_abs_diff_eq!(a.theta_hat[0], b.theta_hat[0], epsilon = 1e-7);
    }

    #[test]
    fn determinism_of_estimate() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let data = simulate(&spec, &[5.0], 80, 5, None).unwrap();
        let config = OptimizerConfig::new(EngineKind::Esrif, vec![1.0]);
        let a = estimate(&spec, &data, &config);
        let b = estimate(&spec, &data, &config);
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.value.to_bits(), y.value.to_bits());
        }
    }

    #[test]
    fn quasi_newton_direction_also_converges() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let data = simulate(&spec, &[5.0], 250, 1010, None).unwrap();
        let mut config = OptimizerConfig::new(EngineKind::Esrif, vec![1.0]);
        config.direction = DirectionRule::MemorylessBfgs;
        let result = estimate(&spec, &data, &config);
        assert!((result.theta_hat[0] - 5.0).abs() <= 0.5, "{}", result.theta_hat[0]);
    }

    #[test]
    fn grid_search_oracle_matches_estimate() {
        // Scalar family with R = θ: the PI over a grid of θ must attain its
        // minimum where the descent iteration stops.
        let spec = families::twostate_spec::<f64>(0.6);
        let data = simulate(&spec, &[0.3, 1.2], 120, 15, None).unwrap();
        let mut config = OptimizerConfig::new(EngineKind::Esrcf, vec![0.0, 0.5]);
        config.bounds = Some((vec![-2.0, -3.0], vec![2.0, 3.0]));
        let result = estimate(&spec, &data, &config);

        // 1-D grid over θ2 holding θ1 at the estimate: the estimate's θ2
        // must beat every grid point (θ2 enters R and Q; μ smooth in it).
        let t1 = result.theta_hat[0];
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..1000 {
            let t2 = 0.1 + 3.0 * (i as f64) / 999.0;
            let v = evaluate_pi_value(&spec, &data, &[t1, t2], EngineKind::Esrcf).unwrap();
            if v < best.0 {
                best = (v, t2);
            }
        }
        let grid_spacing = 3.0 / 999.0;
        assert!(
            (result.theta_hat[1].abs() - best.1.abs()).abs() <= grid_spacing + 1e-6,
            "estimate {} vs grid {}",
            result.theta_hat[1],
            best.1
        );
    }

    #[test]
    fn filter_failure_is_terminal_and_recorded() {
        let spec = families::example3_spec::<f64>(1e-9).unwrap();
        let data = simulate(&spec, &[5.0], 100, 3, None).unwrap();
        let config = OptimizerConfig::new(EngineKind::Conventional, vec![1.0]);
        let result = estimate(&spec, &data, &config);
        match &result.termination {
            Termination::FilterFailure { step, cause } => {
                assert!(*step >= 1);
                assert!(!cause.is_empty());
            }
            other => panic!("expected filter failure, got {other:?}"),
        }
        assert!(result.final_states.is_none());
    }
}
