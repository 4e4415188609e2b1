//! Parameterized linear-Gaussian state-space models.
//!
//! A [`ModelSpec`] maps a parameter vector θ to the matrix family
//!
//! ```text
//! x_k = F(θ) x_{k-1} + B(θ) u_{k-1} + G(θ) w_{k-1},   w ~ N(0, Q(θ))
//! z_k = H(θ) x_k + v_k,                               v ~ N(0, R(θ))
//! x_1 ~ N(x̄₀(θ), Π₀(θ))
//! ```
//!
//! with derivatives supplied either analytically or by central finite
//! differences. [`evaluate`] produces the fully differentiated snapshot the
//! filters consume; [`simulate`] draws a seeded measurement record. Built-in
//! families live in [`families`], including the ill-conditioned benchmark
//! problem whose measurement covariance degenerates as δ → roundoff.

use std::io::{BufRead, Write};
use std::sync::Arc;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array_sensitivity::{DiffMatrix, DiffVector, Differentiated};
use crate::error::{LinalgError, ModelError};
use crate::io::{fmt_scalar, read_csv_lines, write_meta_lines, FileMeta};
use crate::triarray::{cholesky_upper, cholesky_upper_psd};
use crate::{Matrix, Scalar, Vector};

/// Dimensions of a state-space model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// State dimension n.
    pub state_dim: usize,
    /// Measurement dimension m.
    pub obs_dim: usize,
    /// Deterministic input dimension d.
    pub input_dim: usize,
    /// Process-noise dimension q.
    pub noise_dim: usize,
    /// Number of unknown parameters p.
    pub param_dim: usize,
}

impl ModelDims {
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        input_dim: usize,
        noise_dim: usize,
        param_dim: usize,
    ) -> Self {
        ModelDims {
            state_dim,
            obs_dim,
            input_dim,
            noise_dim,
            param_dim,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.state_dim == 0 || self.obs_dim == 0 {
            return Err(ModelError::Dimension(
                "state and measurement dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// System matrices evaluated at one parameter point, without derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices<T> {
    /// F, n×n.
    pub state_transition: Matrix<T>,
    /// B, n×d.
    pub input_map: Matrix<T>,
    /// G, n×q.
    pub noise_map: Matrix<T>,
    /// H, m×n.
    pub observation: Matrix<T>,
    /// Q, q×q.
    pub process_cov: Matrix<T>,
    /// R, m×m.
    pub measurement_cov: Matrix<T>,
    /// x̄₀, n.
    pub init_mean: Vector<T>,
    /// Π₀, n×n.
    pub init_cov: Matrix<T>,
}

impl<T: Scalar> SystemMatrices<T> {
    fn check(&self, dims: &ModelDims) -> Result<(), ModelError> {
        let n = dims.state_dim;
        let m = dims.obs_dim;
        let d = dims.input_dim;
        let q = dims.noise_dim;
        let expect = [
            ("F", self.state_transition.shape(), [n, n]),
            ("B", self.input_map.shape(), [n, d]),
            ("G", self.noise_map.shape(), [n, q]),
            ("H", self.observation.shape(), [m, n]),
            ("Q", self.process_cov.shape(), [q, q]),
            ("R", self.measurement_cov.shape(), [m, m]),
            ("Pi0", self.init_cov.shape(), [n, n]),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(ModelError::Dimension(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    got[0], got[1], want[0], want[1]
                )));
            }
        }
        if self.init_mean.len() != n {
            return Err(ModelError::Dimension(format!(
                "x0 has length {}, expected {n}",
                self.init_mean.len()
            )));
        }
        let finite = self.state_transition.iter().all(|v| v.is_finite())
            && self.input_map.iter().all(|v| v.is_finite())
            && self.noise_map.iter().all(|v| v.is_finite())
            && self.observation.iter().all(|v| v.is_finite())
            && self.process_cov.iter().all(|v| v.is_finite())
            && self.measurement_cov.iter().all(|v| v.is_finite())
            && self.init_mean.iter().all(|v| v.is_finite())
            && self.init_cov.iter().all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::Domain(
                "system matrices contain non-finite entries".into(),
            ));
        }
        Ok(())
    }

    fn central_difference(plus: &Self, minus: &Self, inv_2h: T) -> Self {
        let d = |p: &Matrix<T>, m: &Matrix<T>| (p - m) * inv_2h;
        SystemMatrices {
            state_transition: d(&plus.state_transition, &minus.state_transition),
            input_map: d(&plus.input_map, &minus.input_map),
            noise_map: d(&plus.noise_map, &minus.noise_map),
            observation: d(&plus.observation, &minus.observation),
            process_cov: d(&plus.process_cov, &minus.process_cov),
            measurement_cov: d(&plus.measurement_cov, &minus.measurement_cov),
            init_mean: (&plus.init_mean - &minus.init_mean) * inv_2h,
            init_cov: d(&plus.init_cov, &minus.init_cov),
        }
    }
}

/// Fully differentiated model snapshot at a fixed θ.
///
/// `Q`, `R`, `Π₀` and their derivatives are symmetrized on construction.
#[derive(Debug, Clone)]
pub struct ModelEval<T> {
    pub dims: ModelDims,
    pub state_transition: DiffMatrix<T>,
    pub input_map: DiffMatrix<T>,
    pub noise_map: DiffMatrix<T>,
    pub observation: DiffMatrix<T>,
    pub process_cov: DiffMatrix<T>,
    pub measurement_cov: DiffMatrix<T>,
    pub init_mean: DiffVector<T>,
    pub init_cov: DiffMatrix<T>,
}

impl<T: Scalar> ModelEval<T> {
    pub fn param_count(&self) -> usize {
        self.state_transition.param_count()
    }
}

/// Provider of model matrices as a function of θ.
pub type ValueFn<T> =
    Arc<dyn Fn(&[T]) -> Result<SystemMatrices<T>, ModelError> + Send + Sync>;
/// Provider of the p analytic matrix derivatives as a function of θ.
pub type DerivFn<T> =
    Arc<dyn Fn(&[T]) -> Result<Vec<SystemMatrices<T>>, ModelError> + Send + Sync>;

/// How [`evaluate`] obtains the matrix derivatives.
#[derive(Clone)]
pub enum DerivativeMode<T> {
    /// Exact derivatives from a user-supplied callback.
    Analytic(DerivFn<T>),
    /// Central finite differences with step `h = ε^{1/3}·max(1, |θᵢ|)`
    /// unless an explicit step is given.
    FiniteDifference { step: Option<T> },
}

impl<T> std::fmt::Debug for DerivativeMode<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DerivativeMode::Analytic(_) => f.write_str("Analytic"),
            DerivativeMode::FiniteDifference { .. } => f.write_str("FiniteDifference"),
        }
    }
}

/// Serializable description of a built-in model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f00: Option<f64>,
}

/// A parameterized model family: dimensions, matrix provider, derivative
/// provider and an optional admissible box on θ.
#[derive(Clone)]
pub struct ModelSpec<T> {
    dims: ModelDims,
    values: ValueFn<T>,
    derivatives: DerivativeMode<T>,
    bounds: Option<(Vec<T>, Vec<T>)>,
    family: Option<FamilyConfig>,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn new(dims: ModelDims, values: ValueFn<T>, derivatives: DerivativeMode<T>) -> Self {
        ModelSpec {
            dims,
            values,
            derivatives,
            bounds: None,
            family: None,
        }
    }

    pub fn with_bounds(mut self, lower: Vec<T>, upper: Vec<T>) -> Self {
        self.bounds = Some((lower, upper));
        self
    }

    pub fn with_family(mut self, family: FamilyConfig) -> Self {
        self.family = Some(family);
        self
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn bounds(&self) -> Option<(&[T], &[T])> {
        self.bounds.as_ref().map(|(l, u)| (l.as_slice(), u.as_slice()))
    }

    pub fn family(&self) -> Option<&FamilyConfig> {
        self.family.as_ref()
    }

    /// Raw matrices at θ, dimension-checked, without derivatives.
    pub fn matrices(&self, theta: &[T]) -> Result<SystemMatrices<T>, ModelError> {
        self.check_theta(theta)?;
        let m = (self.values)(theta)?;
        m.check(&self.dims)?;
        Ok(m)
    }

    fn check_theta(&self, theta: &[T]) -> Result<(), ModelError> {
        if theta.len() != self.dims.param_dim {
            return Err(ModelError::Dimension(format!(
                "theta has length {}, expected {}",
                theta.len(),
                self.dims.param_dim
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Domain("theta contains non-finite entries".into()));
        }
        Ok(())
    }
}

impl<T> std::fmt::Debug for ModelSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dims", &self.dims)
            .field("derivatives", &self.derivatives)
            .field("family", &self.family)
            .finish_non_exhaustive()
    }
}

fn symmetrize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let half = crate::from_f64::<T>(0.5);
    (&m.t().to_owned() + m) * half
}

/// Evaluates all system matrices and their p derivatives at θ.
///
/// Covariance blocks and their derivatives are symmetrized as
/// `(M + Mᵀ)/2`; `R` and `Π₀` must be positive definite at the requested
/// point and `Q` positive semidefinite.
pub fn evaluate<T: Scalar>(spec: &ModelSpec<T>, theta: &[T]) -> Result<ModelEval<T>, ModelError> {
    spec.dims.validate()?;
    let value = spec.matrices(theta)?;
    let p = spec.dims.param_dim;

    let derivs: Vec<SystemMatrices<T>> = match &spec.derivatives {
        DerivativeMode::Analytic(f) => {
            let d = f(theta)?;
            if d.len() != p {
                return Err(ModelError::Dimension(format!(
                    "analytic derivative callback returned {} matrices sets, expected {p}",
                    d.len()
                )));
            }
            for di in &d {
                di.check(&spec.dims)?;
            }
            d
        }
        DerivativeMode::FiniteDifference { step } => {
            let cbrt_eps = T::epsilon().powf(crate::from_f64(1.0 / 3.0));
            let mut out = Vec::with_capacity(p);
            for i in 0..p {
                let h = step.unwrap_or_else(|| cbrt_eps * T::one().max(theta[i].abs()));
                let mut tp = theta.to_vec();
                tp[i] = tp[i] + h;
                let mut tm = theta.to_vec();
                tm[i] = tm[i] - h;
                let plus = spec.matrices(&tp)?;
                let minus = spec.matrices(&tm)?;
                let inv_2h = (crate::from_f64::<T>(2.0) * h).recip();
                out.push(SystemMatrices::central_difference(&plus, &minus, inv_2h));
            }
            out
        }
    };

    let field = |get: fn(&SystemMatrices<T>) -> &Matrix<T>, sym: bool| -> DiffMatrix<T> {
        let v = if sym {
            symmetrize(get(&value))
        } else {
            get(&value).clone()
        };
        let ds = derivs
            .iter()
            .map(|d| if sym { symmetrize(get(d)) } else { get(d).clone() })
            .collect();
        Differentiated::new(v, ds)
    };

    let eval = ModelEval {
        dims: spec.dims,
        state_transition: field(|m| &m.state_transition, false),
        input_map: field(|m| &m.input_map, false),
        noise_map: field(|m| &m.noise_map, false),
        observation: field(|m| &m.observation, false),
        process_cov: field(|m| &m.process_cov, true),
        measurement_cov: field(|m| &m.measurement_cov, true),
        init_mean: Differentiated::new(
            value.init_mean.clone(),
            derivs.iter().map(|d| d.init_mean.clone()).collect(),
        ),
        init_cov: field(|m| &m.init_cov, true),
    };

    if let Err(LinalgError::NotPositiveDefinite { minor }) =
        cholesky_upper(&eval.measurement_cov.value)
    {
        return Err(ModelError::Domain(format!(
            "measurement covariance R is not positive definite at this theta (minor {minor})"
        )));
    }
    if let Err(LinalgError::NotPositiveDefinite { minor }) = cholesky_upper(&eval.init_cov.value)
    {
        return Err(ModelError::Domain(format!(
            "initial covariance is not positive definite at this theta (minor {minor})"
        )));
    }
    if cholesky_upper_psd(&eval.process_cov.value).is_err() {
        return Err(ModelError::Domain(
            "process covariance Q is not positive semidefinite at this theta".into(),
        ));
    }
    Ok(eval)
}

/// Metadata recorded alongside simulated measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub seed: u64,
    pub theta_star: Vec<f64>,
    pub generator: String,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyConfig>,
}

/// A simulated (or loaded) measurement record `{z_k, u_k}`, k = 1..N.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementLog<T> {
    pub meta: LogMeta,
    /// N×m, row k−1 holds zₖ.
    pub measurements: Matrix<T>,
    /// N×d, row k−1 holds uₖ.
    pub inputs: Matrix<T>,
}

impl<T: Scalar> MeasurementLog<T> {
    pub fn samples(&self) -> usize {
        self.measurements.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.measurements.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// zₖ for 1-based step k.
    pub fn measurement(&self, k: usize) -> ndarray::ArrayView1<'_, T> {
        self.measurements.row(k - 1)
    }

    /// uₖ for 1-based step k.
    pub fn input(&self, k: usize) -> ndarray::ArrayView1<'_, T> {
        self.inputs.row(k - 1)
    }

    /// CSV with header `k,z_1..z_m,u_1..u_d` after the metadata block.
    pub fn write_csv<W: Write>(&self, w: &mut W, file_meta: &FileMeta) -> std::io::Result<()> {
        let mut extra: Vec<(&str, String)> = vec![
            ("generator", self.meta.generator.clone()),
            (
                "theta_star",
                self.meta
                    .theta_star
                    .iter()
                    .map(|v| fmt_scalar(v))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("samples", self.meta.samples.to_string()),
        ];
        if let Some(fam) = &self.meta.family {
            extra.push(("family", fam.name.clone()));
            if let Some(d) = fam.delta {
                extra.push(("delta", fmt_scalar(d)));
            }
        }
        let meta = FileMeta {
            seed: Some(self.meta.seed),
            ..file_meta.clone()
        };
        write_meta_lines(w, &meta, &extra)?;
        let m = self.obs_dim();
        let d = self.input_dim();
        let mut header = String::from("k");
        for j in 1..=m {
            header.push_str(&format!(",z_{j}"));
        }
        for j in 1..=d {
            header.push_str(&format!(",u_{j}"));
        }
        writeln!(w, "{header}")?;
        for k in 0..self.samples() {
            let mut row = format!("{}", k + 1);
            for j in 0..m {
                row.push(',');
                row.push_str(&fmt_scalar(self.measurements[[k, j]]));
            }
            for j in 0..d {
                row.push(',');
                row.push_str(&fmt_scalar(self.inputs[[k, j]]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Parses the CSV format written by [`Self::write_csv`]. Metadata lines
    /// are ignored except for `seed`, `generator` and `theta_star`.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ModelError> {
        let mut seed = 0u64;
        let mut generator = String::from("unknown");
        let mut theta_star: Vec<f64> = Vec::new();
        let mut rows: Vec<String> = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| ModelError::Domain(format!("read error: {e}")))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((k, v)) = rest.split_once('=') {
                    match k.trim() {
                        "seed" => seed = v.trim().parse().unwrap_or(0),
                        "generator" => generator = v.trim().to_string(),
                        "theta_star" => {
                            theta_star = v
                                .trim()
                                .split(';')
                                .filter_map(|x| x.parse().ok())
                                .collect();
                        }
                        _ => {}
                    }
                }
                continue;
            }
            rows.push(t.to_string());
        }
        let header = rows
            .first()
            .ok_or_else(|| ModelError::Domain("empty measurement CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(ModelError::Domain("measurement CSV must start with k column".into()));
        }
        let m = cols.iter().filter(|c| c.starts_with("z_")).count();
        let d = cols.iter().filter(|c| c.starts_with("u_")).count();
        let n = rows.len() - 1;
        if m == 0 {
            return Err(ModelError::Domain("no z_ columns in measurement CSV".into()));
        }
        let mut z = Matrix::<T>::zeros((n, m));
        let mut u = Matrix::<T>::zeros((n, d));
        for (i, row) in rows[1..].iter().enumerate() {
            let vals: Vec<&str> = row.split(',').collect();
            if vals.len() != 1 + m + d {
                return Err(ModelError::Domain(format!(
                    "row {} has {} fields, expected {}",
                    i + 1,
                    vals.len(),
                    1 + m + d
                )));
            }
            for j in 0..m {
                z[[i, j]] = vals[1 + j]
                    .parse()
                    .map_err(|_| ModelError::Domain(format!("bad number: {}", vals[1 + j])))?;
            }
            for j in 0..d {
                u[[i, j]] = vals[1 + m + j]
                    .parse()
                    .map_err(|_| ModelError::Domain(format!("bad number: {}", vals[1 + m + j])))?;
            }
        }
        Ok(MeasurementLog {
            meta: LogMeta {
                seed,
                theta_star,
                generator,
                samples: n,
                family: None,
            },
            measurements: z,
            inputs: u,
        })
    }

    /// JSON document with a `meta` block and the raw data arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let z: Vec<Vec<f64>> = self
            .measurements
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
            .collect();
        let u: Vec<Vec<f64>> = self
            .inputs
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
            .collect();
        serde_json::json!({ "meta": self.meta, "z": z, "u": u })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, ModelError> {
        let meta: LogMeta = serde_json::from_value(v["meta"].clone())
            .map_err(|e| ModelError::Domain(format!("bad meta block: {e}")))?;
        let parse = |key: &str| -> Result<Vec<Vec<f64>>, ModelError> {
            serde_json::from_value(v[key].clone())
                .map_err(|e| ModelError::Domain(format!("bad {key} block: {e}")))
        };
        let z = parse("z")?;
        let u = parse("u")?;
        let n = z.len();
        let m = z.first().map_or(0, |r| r.len());
        let d = u.first().map_or(0, |r| r.len());
        let mut zm = Matrix::<T>::zeros((n, m));
        let mut um = Matrix::<T>::zeros((n, d));
        for (i, row) in z.iter().enumerate() {
            for (j, val) in row.iter().enumerate() {
                zm[[i, j]] = crate::from_f64(*val);
            }
        }
        for (i, row) in u.iter().enumerate() {
            for (j, val) in row.iter().enumerate() {
                um[[i, j]] = crate::from_f64(*val);
            }
        }
        Ok(MeasurementLog {
            meta,
            measurements: zm,
            inputs: um,
        })
    }
}

/// Simulates the model at `theta_star` for `samples` steps.
///
/// Sampling is a Cholesky-factor transform of standard normals drawn from
/// ChaCha12 seeded with `seed`; the draw order is x₁ (n draws), then per
/// step k ≥ 2 the process noise (q draws) before the measurement noise
/// (m draws); step 1 draws measurement noise only. Covariances may be
/// positive semidefinite here (zero-noise simulation is legal).
pub fn simulate<T: Scalar>(
    spec: &ModelSpec<T>,
    theta_star: &[T],
    samples: usize,
    seed: u64,
    inputs: Option<&Matrix<T>>,
) -> Result<MeasurementLog<T>, ModelError>
where
    StandardNormal: Distribution<T>,
{
    if samples == 0 {
        return Err(ModelError::Domain("samples must be >= 1".into()));
    }
    let dims = spec.dims();
    let mats = spec.matrices(theta_star)?;
    let n = dims.state_dim;
    let m = dims.obs_dim;
    let d = dims.input_dim;
    let q = dims.noise_dim;

    let u = match inputs {
        Some(u) => {
            if u.nrows() != samples || u.ncols() != d {
                return Err(ModelError::Dimension(format!(
                    "inputs are {}x{}, expected {samples}x{d}",
                    u.nrows(),
                    u.ncols()
                )));
            }
            u.clone()
        }
        None => Matrix::<T>::zeros((samples, d)),
    };

    let domain = |what: &str| ModelError::Domain(format!("{what} is not positive semidefinite"));
    let init_factor =
        cholesky_upper_psd(&symmetrize(&mats.init_cov)).map_err(|_| domain("initial covariance"))?;
    let proc_factor = cholesky_upper_psd(&symmetrize(&mats.process_cov))
        .map_err(|_| domain("process covariance Q"))?;
    let meas_factor = cholesky_upper_psd(&symmetrize(&mats.measurement_cov))
        .map_err(|_| domain("measurement covariance R"))?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vector<T> {
        Vector::from_iter((0..len).map(|_| StandardNormal.sample(&mut rng)))
    };

    let mut z = Matrix::<T>::zeros((samples, m));
    let mut x = &mats.init_mean + &init_factor.matrix().t().dot(&draw(n));
    for k in 0..samples {
        if k > 0 {
            let w = proc_factor.matrix().t().dot(&draw(q));
            x = mats.state_transition.dot(&x)
                + mats.input_map.dot(&u.row(k - 1))
                + mats.noise_map.dot(&w);
        }
        let v = meas_factor.matrix().t().dot(&draw(m));
        let zk = mats.observation.dot(&x) + &v;
        z.slice_mut(s![k, ..]).assign(&zk);
    }

    let theta_star_f64 = theta_star
        .iter()
        .map(|t| t.to_f64().unwrap_or(f64::NAN))
        .collect();
    Ok(MeasurementLog {
        meta: LogMeta {
            seed,
            theta_star: theta_star_f64,
            generator: "chacha12".into(),
            samples,
            family: spec.family().cloned(),
        },
        measurements: z,
        inputs: u,
    })
}

/// Built-in model families.
pub mod families {
    use super::*;

    /// The ill-conditioned benchmark family: a three-state random constant
    /// observed through two nearly collinear measurement rows, with
    /// `R = δ²θ²I₂` and `Π₀ = θ²I₃`. As δ → roundoff the innovation
    /// covariance after the first measurement degenerates in machine
    /// precision; θ is the single unknown parameter.
    pub fn example3_spec<T: Scalar>(delta: f64) -> Result<ModelSpec<T>, ModelError> {
        if !(delta > 0.0) {
            return Err(ModelError::Domain("delta must be > 0".into()));
        }
        let dims = ModelDims::new(3, 2, 1, 1, 1);
        let dl = crate::from_f64::<T>(delta);
        let values: ValueFn<T> = Arc::new(move |theta: &[T]| {
            let th = theta[0];
            let mut h = Matrix::<T>::ones((2, 3));
            h[[1, 2]] = T::one() + dl;
            Ok(SystemMatrices {
                state_transition: Matrix::<T>::eye(3),
                input_map: Matrix::<T>::zeros((3, 1)),
                noise_map: Matrix::<T>::zeros((3, 1)),
                observation: h,
                process_cov: Matrix::<T>::eye(1),
                measurement_cov: Matrix::<T>::eye(2) * (dl * dl * th * th),
                init_mean: Vector::<T>::zeros(3),
                init_cov: Matrix::<T>::eye(3) * (th * th),
            })
        });
        let two = crate::from_f64::<T>(2.0);
        let derivs: DerivFn<T> = Arc::new(move |theta: &[T]| {
            let th = theta[0];
            Ok(vec![SystemMatrices {
                state_transition: Matrix::<T>::zeros((3, 3)),
                input_map: Matrix::<T>::zeros((3, 1)),
                noise_map: Matrix::<T>::zeros((3, 1)),
                observation: Matrix::<T>::zeros((2, 3)),
                process_cov: Matrix::<T>::zeros((1, 1)),
                measurement_cov: Matrix::<T>::eye(2) * (two * dl * dl * th),
                init_mean: Vector::<T>::zeros(3),
                init_cov: Matrix::<T>::eye(3) * (two * th),
            }])
        });
        Ok(
            ModelSpec::new(dims, values, DerivativeMode::Analytic(derivs))
                .with_bounds(vec![crate::from_f64(1e-3)], vec![crate::from_f64(1e3)])
                .with_family(FamilyConfig {
                    name: "example3".into(),
                    delta: Some(delta),
                    f00: None,
                }),
        )
    }

    /// A smooth two-state, two-parameter family used for gradient checks.
    /// θ₁ shifts the dynamics and the observation map, θ₂ scales the noise
    /// covariances. `f00` sets the base (1,1) entry of F; with `f00 = 0`
    /// the transition matrix is singular at θ₁ = 0.
    pub fn twostate_spec<T: Scalar>(f00: f64) -> ModelSpec<T> {
        let dims = ModelDims::new(2, 1, 1, 1, 2);
        let c = move |x: f64| crate::from_f64::<T>(x);
        let values: ValueFn<T> = Arc::new(move |theta: &[T]| {
            let t1 = theta[0];
            let t2 = theta[1];
            let mut f = Matrix::<T>::zeros((2, 2));
            f[[0, 0]] = c(f00) + c(0.1) * t1;
            f[[0, 1]] = c(0.1);
            f[[1, 1]] = c(0.5);
            let mut b = Matrix::<T>::zeros((2, 1));
            b[[0, 0]] = c(0.5);
            b[[1, 0]] = c(1.0);
            let mut g = Matrix::<T>::zeros((2, 1));
            g[[0, 0]] = c(1.0);
            g[[1, 0]] = c(0.3);
            let mut h = Matrix::<T>::zeros((1, 2));
            h[[0, 0]] = c(1.0);
            h[[0, 1]] = c(0.3) + c(0.2) * t1;
            let q = Matrix::<T>::eye(1) * (c(0.2) + c(0.05) * t2 * t2);
            let r = Matrix::<T>::eye(1) * (c(0.3) + c(0.1) * t2 * t2);
            let mut pi0 = Matrix::<T>::eye(2);
            pi0[[0, 0]] = c(1.0) + c(0.1) * t1 * t1;
            pi0[[1, 1]] = c(0.8);
            let mut x0 = Vector::<T>::zeros(2);
            x0[0] = c(0.1) * t1;
            Ok(SystemMatrices {
                state_transition: f,
                input_map: b,
                noise_map: g,
                observation: h,
                process_cov: q,
                measurement_cov: r,
                init_mean: x0,
                init_cov: pi0,
            })
        });
        let derivs: DerivFn<T> = Arc::new(move |theta: &[T]| {
            let t1 = theta[0];
            let t2 = theta[1];
            let zero = || SystemMatrices {
                state_transition: Matrix::<T>::zeros((2, 2)),
                input_map: Matrix::<T>::zeros((2, 1)),
                noise_map: Matrix::<T>::zeros((2, 1)),
                observation: Matrix::<T>::zeros((1, 2)),
                process_cov: Matrix::<T>::zeros((1, 1)),
                measurement_cov: Matrix::<T>::zeros((1, 1)),
                init_mean: Vector::<T>::zeros(2),
                init_cov: Matrix::<T>::zeros((2, 2)),
            };
            let mut d1 = zero();
            d1.state_transition[[0, 0]] = c(0.1);
            d1.observation[[0, 1]] = c(0.2);
            d1.init_cov[[0, 0]] = c(0.2) * t1;
            d1.init_mean[0] = c(0.1);
            let mut d2 = zero();
            d2.process_cov[[0, 0]] = c(0.1) * t2;
            d2.measurement_cov[[0, 0]] = c(0.2) * t2;
            Ok(vec![d1, d2])
        });
        ModelSpec::new(dims, values, DerivativeMode::Analytic(derivs)).with_family(FamilyConfig {
            name: "twostate".into(),
            delta: None,
            f00: Some(f00),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triarray::max_abs_entry;
    use approx::assert_abs_diff_eq;

    #[test]
    fn example3_matrices_at_theta_one() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let eval = evaluate(&spec, &[1.0]).unwrap();
        assert_abs_diff_eq!(eval.measurement_cov.value[[0, 0]], 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(eval.measurement_cov.value[[1, 1]], 1e-4, epsilon = 1e-18);
        assert_eq!(eval.observation.value[[1, 2]], 1.01);
        assert_eq!(eval.init_cov.value, Matrix::<f64>::eye(3));
    }

    #[test]
    fn example3_derivatives_at_theta_five() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let eval = evaluate(&spec, &[5.0]).unwrap();
        let dr = &eval.measurement_cov.derivs[0];
        assert_abs_diff_eq!(dr[[0, 0]], 2.0 * 1e-4 * 5.0, epsilon = 1e-18);
        let dp = &eval.init_cov.derivs[0];
        assert_abs_diff_eq!(dp[[0, 0]], 10.0, epsilon = 1e-15);
    }

    #[test]
    fn example3_rejects_bad_domain() {
        assert!(families::example3_spec::<f64>(0.0).is_err());
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        assert!(matches!(
            evaluate(&spec, &[0.0]),
            Err(ModelError::Domain(_))
        ));
    }

    #[test]
    fn innovation_cov_conditioning_grows_as_delta_shrinks() {
        // cond(R_e,1) with R_e,1 = R + H Pi0 Ht grows as delta -> 0.
        let cond = |delta: f64| {
            let spec = families::example3_spec::<f64>(delta).unwrap();
            let e = evaluate(&spec, &[1.0]).unwrap();
            let h = &e.observation.value;
            let re = h.dot(&e.init_cov.value).dot(&h.t()) + &e.measurement_cov.value;
            // 2x2 symmetric: eigenvalues in closed form
            let tr = re[[0, 0]] + re[[1, 1]];
            let det = re[[0, 0]] * re[[1, 1]] - re[[0, 1]] * re[[1, 0]];
            let disc = (tr * tr / 4.0 - det).sqrt();
            (tr / 2.0 + disc) / (tr / 2.0 - disc)
        };
        assert!(cond(1e-3) > 50.0 * cond(1e-2));
        assert!(cond(1e-5) > 50.0 * cond(1e-3));
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let analytic = families::twostate_spec::<f64>(0.6);
        let fd = ModelSpec::new(
            analytic.dims(),
            Arc::new({
                let a = families::twostate_spec::<f64>(0.6);
                move |t: &[f64]| a.matrices(t)
            }),
            DerivativeMode::FiniteDifference { step: None },
        );
        let theta = [0.4, -0.7];
        let ea = evaluate(&analytic, &theta).unwrap();
        let ef = evaluate(&fd, &theta).unwrap();
        for i in 0..2 {
            let pairs = [
                (&ea.state_transition.derivs[i], &ef.state_transition.derivs[i]),
                (&ea.observation.derivs[i], &ef.observation.derivs[i]),
                (&ea.process_cov.derivs[i], &ef.process_cov.derivs[i]),
                (&ea.measurement_cov.derivs[i], &ef.measurement_cov.derivs[i]),
                (&ea.init_cov.derivs[i], &ef.init_cov.derivs[i]),
            ];
            for (a, f) in pairs {
                let rel = max_abs_entry(&(a - f)) / max_abs_entry(f).max(1.0);
                assert!(rel <= 1e-6, "param {i}: rel {rel}");
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_and_noiseless_case_recurses() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let a = simulate(&spec, &[5.0], 50, 42, None).unwrap();
        let b = simulate(&spec, &[5.0], 50, 42, None).unwrap();
        assert_eq!(a.measurements, b.measurements);
        let c = simulate(&spec, &[5.0], 50, 43, None).unwrap();
        assert_ne!(a.measurements, c.measurements);

        // zero noise: z_k = H x(k) with x_k = F x_{k-1} + B u_{k-1}
        let dims = ModelDims::new(2, 1, 1, 1, 1);
        let values: ValueFn<f64> = Arc::new(|_t: &[f64]| {
            let mut f = Matrix::<f64>::eye(2);
            f[[0, 1]] = 0.5;
            let mut b = Matrix::<f64>::zeros((2, 1));
            b[[1, 0]] = 1.0;
            Ok(SystemMatrices {
                state_transition: f,
                input_map: b,
                noise_map: Matrix::<f64>::zeros((2, 1)),
                observation: Matrix::<f64>::ones((1, 2)),
                process_cov: Matrix::<f64>::zeros((1, 1)),
                measurement_cov: Matrix::<f64>::zeros((1, 1)),
                init_mean: Vector::from(vec![1.0, 0.0]),
                init_cov: Matrix::<f64>::zeros((2, 2)),
            })
        });
        let spec = ModelSpec::new(dims, values, DerivativeMode::FiniteDifference { step: None });
        let mut u = Matrix::<f64>::zeros((4, 1));
        for k in 0..4 {
            u[[k, 0]] = k as f64;
        }
        let log = simulate(&spec, &[0.0], 4, 7, Some(&u)).unwrap();
        // x1=(1,0) z1=1; x2=F x1 + B u1 = (1,0)+(0,0) -> z2=1;
        // x3=F x2 + B u2=(1,1) -> z3=2; x4=(1.5,1)+(0,2)=(1.5,3) -> z4=4.5
        let got: Vec<f64> = log.measurements.column(0).to_vec();
        assert_eq!(got, vec![1.0, 1.0, 2.0, 4.5]);
    }

    #[test]
    fn measurement_log_round_trips_csv_and_json() {
        let spec = families::example3_spec::<f64>(1e-2).unwrap();
        let log = simulate(&spec, &[5.0], 10, 42, None).unwrap();

        let mut buf = Vec::new();
        log.write_csv(&mut buf, &FileMeta::new("test")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# tool_version="));
        assert!(text.contains("k,z_1,z_2,u_1"));
        let back = MeasurementLog::<f64>::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.measurements, log.measurements);
        assert_eq!(back.inputs, log.inputs);
        assert_eq!(back.meta.seed, 42);

        let json = log.to_json();
        let back = MeasurementLog::<f64>::from_json(&json).unwrap();
        assert_eq!(back.measurements, log.measurements);
        assert_eq!(back.meta, log.meta);
    }
}
