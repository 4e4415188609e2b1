//! Derivative propagation through orthogonal triangularization.
//!
//! Given a pre-array `A(θ)` and its parameter derivatives, the two entry
//! points compute the triangularized post-array together with the exact
//! derivatives of its nontrivial blocks — without ever differentiating the
//! orthogonal factor explicitly. `Q` is computed once from the value array
//! and reused for every parameter.
//!
//! For the lower orientation (`QA = L`, partition rows `k` then `s`):
//!
//! ```text
//! L'21 = (Ūᵀ + D + L̄)·L21
//! L'22 = (Ūᵀ − Ū)·L22 + L21⁻ᵀ·Xᵀ·L12 + V
//! ```
//!
//! where `(L̄, D, Ū)` is the strict-lower / diagonal / strict-upper split of
//! `Y·L21⁻¹` and `[X N; Y V] = Q·A'`. The upper orientation swaps the roles
//! of the split and of the `X`/`Y` blocks. No derivative exists for the
//! residual block (`R22` in the upper case, the `L12` rows in the lower
//! case with `k > 0`); it is excluded, not zeroed into pretend-exactness.

use ndarray::s;

use crate::error::LinalgError;
use crate::triarray::{
    inf_norm, split_ldu, tri_solve, triangularize_lower, triangularize_upper, Orientation,
    OrthogonalFactor, TriSolve, TriangularFactor,
};
use crate::{Matrix, Scalar, Vector};

/// A value paired with its ordered partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Differentiated<V> {
    pub value: V,
    pub derivs: Vec<V>,
}

/// A dense matrix with its parameter derivatives.
pub type DiffMatrix<T> = Differentiated<Matrix<T>>;
/// A dense vector with its parameter derivatives.
pub type DiffVector<T> = Differentiated<Vector<T>>;

impl<V> Differentiated<V> {
    pub fn new(value: V, derivs: Vec<V>) -> Self {
        Differentiated { value, derivs }
    }

    /// Number of parameters the derivatives are taken against.
    pub fn param_count(&self) -> usize {
        self.derivs.len()
    }
}

impl<T: Scalar> DiffMatrix<T> {
    /// A θ-independent matrix: all derivatives are zero.
    pub fn constant(value: Matrix<T>, params: usize) -> Self {
        let z = Matrix::<T>::zeros(value.raw_dim());
        Differentiated {
            value,
            derivs: vec![z; params],
        }
    }

    fn check_shapes(&self) -> Result<(), LinalgError> {
        for d in &self.derivs {
            if d.shape() != self.value.shape() {
                return Err(LinalgError::dims(
                    "derivative shape differs from value shape",
                ));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> DiffVector<T> {
    /// A θ-independent vector: all derivatives are zero.
    pub fn constant(value: Vector<T>, params: usize) -> Self {
        let z = Vector::<T>::zeros(value.len());
        Differentiated {
            value,
            derivs: vec![z; params],
        }
    }
}

/// Block layout `(s, k, l)` of a pre-array: `s` triangularized columns of
/// block order `s`, `k` extra rows, `l` trailing columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayPartition {
    pub s: usize,
    pub k: usize,
    pub l: usize,
}

impl ArrayPartition {
    pub fn new(s: usize, k: usize, l: usize) -> Self {
        ArrayPartition { s, k, l }
    }

    pub fn rows(&self) -> usize {
        self.s + self.k
    }

    pub fn cols(&self) -> usize {
        self.s + self.l
    }

    fn check<T: Scalar>(&self, a: &Matrix<T>) -> Result<(), LinalgError> {
        if self.s == 0 {
            return Err(LinalgError::dims("partition requires s >= 1"));
        }
        if a.nrows() != self.rows() || a.ncols() != self.cols() {
            return Err(LinalgError::dims(format!(
                "pre-array is {}x{}, partition (s={}, k={}, l={}) needs {}x{}",
                a.nrows(),
                a.ncols(),
                self.s,
                self.k,
                self.l,
                self.rows(),
                self.cols()
            )));
        }
        Ok(())
    }
}

/// The `[X N; Y V]` blocks of `Q·A'` for one parameter (Eq. 15 layout).
///
/// Lower orientation: `X` is `k×s`, `Y` is `s×s`, `N` is `k×l`, `V` is
/// `s×l`. Upper orientation: `X` is `s×s`, `Y` is `k×s`, `N` is `s×l`,
/// `V` is `k×l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBlocks<T> {
    pub x: Matrix<T>,
    pub y: Matrix<T>,
    pub n: Matrix<T>,
    pub v: Matrix<T>,
}

/// Post-array and the derivatives of its defined blocks.
#[derive(Debug, Clone)]
pub struct PostDerivatives<T> {
    q: OrthogonalFactor<T>,
    post: Matrix<T>,
    tri_derivs: Vec<Matrix<T>>,
    side_derivs: Vec<Matrix<T>>,
    blocks: Vec<SensitivityBlocks<T>>,
    orientation: Orientation,
    partition: ArrayPartition,
}

impl<T: Scalar> PostDerivatives<T> {
    pub fn q(&self) -> &OrthogonalFactor<T> {
        &self.q
    }

    /// The full post-array (`R` or `L`).
    pub fn post(&self) -> &Matrix<T> {
        &self.post
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn partition(&self) -> ArrayPartition {
        self.partition
    }

    pub fn param_count(&self) -> usize {
        self.tri_derivs.len()
    }

    /// Derivative of the triangular block (`R11` or `L21`) for parameter `i`.
    pub fn tri_deriv(&self, i: usize) -> &Matrix<T> {
        &self.tri_derivs[i]
    }

    /// Derivative of the side block (`R12` or `L22`) for parameter `i`.
    pub fn side_deriv(&self, i: usize) -> &Matrix<T> {
        &self.side_derivs[i]
    }

    /// The saved `Q·A'` blocks for parameter `i`.
    pub fn blocks(&self, i: usize) -> &SensitivityBlocks<T> {
        &self.blocks[i]
    }

    /// Full-size post-array derivative with the residual block zero-padded.
    ///
    /// The padding is consistent for everything downstream because the
    /// residual block never enters the first `s` post-array columns; with
    /// `k = 0` nothing is padded and the derivative is complete.
    pub fn full_derivative(&self, i: usize) -> Matrix<T> {
        let ArrayPartition { s, k, l } = self.partition;
        let mut d = Matrix::<T>::zeros((s + k, s + l));
        match self.orientation {
            Orientation::Upper => {
                d.slice_mut(s![..s, ..s]).assign(&self.tri_derivs[i]);
                d.slice_mut(s![..s, s..]).assign(&self.side_derivs[i]);
            }
            Orientation::Lower => {
                d.slice_mut(s![k.., ..s]).assign(&self.tri_derivs[i]);
                d.slice_mut(s![k.., s..]).assign(&self.side_derivs[i]);
            }
        }
        d
    }

    /// Post-array with its (zero-padded) derivatives.
    pub fn post_differentiated(&self) -> DiffMatrix<T> {
        let derivs = (0..self.param_count())
            .map(|i| self.full_derivative(i))
            .collect();
        Differentiated::new(self.post.clone(), derivs)
    }
}

fn singular_guard<T: Scalar>(post: &Matrix<T>, tri_diag: &[T]) -> Result<(), LinalgError> {
    let thresh = crate::from_f64::<T>(1e3) * T::epsilon() * inf_norm(post);
    for (i, d) in tri_diag.iter().enumerate() {
        if !d.is_normal() || d.abs() < thresh {
            return Err(LinalgError::SingularPostArray { index: i });
        }
    }
    Ok(())
}

/// Lower-triangularizes the pre-array and propagates its derivatives
/// through the transformation.
pub fn post_derivative_lower<T: Scalar>(
    pre: &DiffMatrix<T>,
    partition: ArrayPartition,
) -> Result<PostDerivatives<T>, LinalgError> {
    pre.check_shapes()?;
    partition.check(&pre.value)?;
    let ArrayPartition { s, k, l: _ } = partition;
    let (q, post) = triangularize_lower(&pre.value, s)?;

    let l21 = post.slice(s![k.., ..s]).to_owned();
    let l12 = post.slice(s![..k, s..]).to_owned();
    let l22 = post.slice(s![k.., s..]).to_owned();
    let diag: Vec<T> = l21.diag().to_vec();
    singular_guard(&post, &diag)?;
    let l21 = TriangularFactor::from_parts_unchecked(l21, Orientation::Lower);

    let mut tri_derivs = Vec::with_capacity(pre.param_count());
    let mut side_derivs = Vec::with_capacity(pre.param_count());
    let mut blocks = Vec::with_capacity(pre.param_count());
    for da in &pre.derivs {
        let w = q.matrix().dot(da);
        let x = w.slice(s![..k, ..s]).to_owned();
        let y = w.slice(s![k.., ..s]).to_owned();
        let n = w.slice(s![..k, s..]).to_owned();
        let v = w.slice(s![k.., s..]).to_owned();

        let m = tri_solve(&l21, &y, TriSolve::Right)?;
        let (lb, d, ub) = split_ldu(&m)?;
        let mut dl21 = (&ub.t().to_owned() + &d + &lb).dot(l21.matrix());
        for i in 0..s {
            for j in (i + 1)..s {
                dl21[[i, j]] = T::zero();
            }
        }
        let mut dl22 = (&ub.t().to_owned() - &ub).dot(&l22) + &v;
        if k > 0 {
            let xt_l12 = x.t().dot(&l12);
            dl22 = dl22 + tri_solve(&l21, &xt_l12, TriSolve::LeftTransposed)?;
        }
        tri_derivs.push(dl21);
        side_derivs.push(dl22);
        blocks.push(SensitivityBlocks { x, y, n, v });
    }

    Ok(PostDerivatives {
        q,
        post,
        tri_derivs,
        side_derivs,
        blocks,
        orientation: Orientation::Lower,
        partition,
    })
}

/// Upper-triangularizes the pre-array and propagates its derivatives
/// through the transformation.
pub fn post_derivative_upper<T: Scalar>(
    pre: &DiffMatrix<T>,
    partition: ArrayPartition,
) -> Result<PostDerivatives<T>, LinalgError> {
    pre.check_shapes()?;
    partition.check(&pre.value)?;
    let ArrayPartition { s, k, l: _ } = partition;
    let (q, post) = triangularize_upper(&pre.value, s)?;

    let r11 = post.slice(s![..s, ..s]).to_owned();
    let r12 = post.slice(s![..s, s..]).to_owned();
    let r22 = post.slice(s![s.., s..]).to_owned();
    let diag: Vec<T> = r11.diag().to_vec();
    singular_guard(&post, &diag)?;
    let r11 = TriangularFactor::from_parts_unchecked(r11, Orientation::Upper);

    let mut tri_derivs = Vec::with_capacity(pre.param_count());
    let mut side_derivs = Vec::with_capacity(pre.param_count());
    let mut blocks = Vec::with_capacity(pre.param_count());
    for da in &pre.derivs {
        let w = q.matrix().dot(da);
        let x = w.slice(s![..s, ..s]).to_owned();
        let y = w.slice(s![s.., ..s]).to_owned();
        let n = w.slice(s![..s, s..]).to_owned();
        let v = w.slice(s![s.., s..]).to_owned();

        let m = tri_solve(&r11, &x, TriSolve::Right)?;
        let (lb, d, ub) = split_ldu(&m)?;
        let mut dr11 = (&lb.t().to_owned() + &d + &ub).dot(r11.matrix());
        for j in 0..s {
            for i in (j + 1)..s {
                dr11[[i, j]] = T::zero();
            }
        }
        let mut dr12 = (&lb.t().to_owned() - &lb).dot(&r12) + &n;
        if k > 0 {
            let yt_r22 = y.t().dot(&r22);
            dr12 = dr12 + tri_solve(&r11, &yt_r22, TriSolve::LeftTransposed)?;
        }
        tri_derivs.push(dr11);
        side_derivs.push(dr12);
        blocks.push(SensitivityBlocks { x, y, n, v });
    }

    Ok(PostDerivatives {
        q,
        post,
        tri_derivs,
        side_derivs,
        blocks,
        orientation: Orientation::Upper,
        partition,
    })
}

/// The paper-style consistency certificate: `max_i ‖(AᵀA)'ᵢ − (PᵀP)'ᵢ‖_∞`
/// with `P` the post-array and the derivative zero-padded on the residual
/// block.
///
/// With `k > 0` the trailing `l×l` block of the comparison is excluded —
/// it is the only part that depends on the residual-block derivative the
/// lemmas do not provide. With `k = 0` the comparison is complete.
pub fn self_check_norm<T: Scalar>(pre: &DiffMatrix<T>, post: &PostDerivatives<T>) -> T {
    let ArrayPartition { s, k, l } = post.partition;
    let a = &pre.value;
    let p = post.post();
    let mut worst = T::zero();
    for i in 0..pre.param_count() {
        let da = &pre.derivs[i];
        let dp = post.full_derivative(i);
        let lhs = da.t().dot(a) + a.t().dot(da);
        let rhs = dp.t().dot(p) + p.t().dot(&dp);
        let mut gap = lhs - rhs;
        if k > 0 && l > 0 {
            gap.slice_mut(s![s.., s..]).fill(T::zero());
        }
        worst = worst.max(inf_norm(&gap));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triarray::{from_rows, max_abs_entry};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize, scale: f64) -> Matrix<f64> {
        let mut m = Matrix::<f64>::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                m[[i, j]] = rng.random_range(-scale..scale);
            }
        }
        m
    }

    /// A(θ) = A0 + Σ θi·Ai, evaluated with its exact derivatives.
    struct LinearFamily {
        base: Matrix<f64>,
        coeffs: Vec<Matrix<f64>>,
    }

    impl LinearFamily {
        fn random(rng: &mut ChaCha12Rng, rows: usize, cols: usize, p: usize) -> Self {
            LinearFamily {
                base: random_matrix(rng, rows, cols, 2.0),
                coeffs: (0..p).map(|_| random_matrix(rng, rows, cols, 1.0)).collect(),
            }
        }

        fn at(&self, theta: &[f64]) -> DiffMatrix<f64> {
            let mut value = self.base.clone();
            for (t, c) in theta.iter().zip(&self.coeffs) {
                value = value + &(c * *t);
            }
            Differentiated::new(value, self.coeffs.clone())
        }
    }

    #[test]
    fn zero_derivative_gives_zero_post_derivatives() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 4, 2.0);
        let pre = DiffMatrix::constant(a, 2);
        let part = ArrayPartition::new(3, 2, 1);
        for post in [
            post_derivative_lower(&pre, part).unwrap(),
            post_derivative_upper(&pre, part).unwrap(),
        ] {
            for i in 0..2 {
                assert!(max_abs_entry(post.tri_deriv(i)) <= 1e-13);
                assert!(max_abs_entry(post.side_deriv(i)) <= 1e-13);
            }
        }
    }

    #[test]
    fn finite_difference_squaring_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for trial in 0..24 {
            let s = rng.random_range(1..5);
            let k = rng.random_range(0..4);
            let l = rng.random_range(0..4);
            let p = rng.random_range(1..4);
            let part = ArrayPartition::new(s, k, l);
            let fam = LinearFamily::random(&mut rng, s + k, s + l, p);
            let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-0.5..0.5)).collect();
            let pre = fam.at(&theta);

            for lower in [false, true] {
                let post = if lower {
                    match post_derivative_lower(&pre, part) {
                        Ok(p) => p,
                        Err(LinalgError::SingularPostArray { .. }) => continue,
                        Err(e) => panic!("{e}"),
                    }
                } else {
                    match post_derivative_upper(&pre, part) {
                        Ok(p) => p,
                        Err(LinalgError::SingularPostArray { .. }) => continue,
                        Err(e) => panic!("{e}"),
                    }
                };
                for i in 0..p {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    tp[i] += h;
                    let mut tm = theta.clone();
                    tm[i] -= h;
                    let ap = fam.at(&tp).value;
                    let am = fam.at(&tm).value;
                    let fd = (&ap.t().dot(&ap) - &am.t().dot(&am)) / (2.0 * h);
                    let dp = post.full_derivative(i);
                    let an = dp.t().dot(post.post()) + post.post().t().dot(&dp);
                    let mut gap = an - fd.clone();
                    if k > 0 && l > 0 {
                        gap.slice_mut(s![s.., s..]).fill(0.0);
                    }
                    let rel = max_abs_entry(&gap) / max_abs_entry(&fd).max(1.0);
                    assert!(rel <= 1e-6, "trial {trial} lower={lower} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn k_zero_reduction_is_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fam = LinearFamily::random(&mut rng, 4, 6, 2);
        let pre = fam.at(&[0.3, -0.1]);
        let part = ArrayPartition::new(4, 0, 2);

        let post = post_derivative_lower(&pre, part).unwrap();
        // Full-partition formula with the (empty) X-term written explicitly.
        let q = post.q().matrix();
        let l21 = TriangularFactor::from_parts_unchecked(
            post.post().slice(s![.., ..4]).to_owned(),
            Orientation::Lower,
        );
        let l22 = post.post().slice(s![.., 4..]).to_owned();
        for i in 0..2 {
            let w = q.dot(&pre.derivs[i]);
            let y = w.slice(s![.., ..4]).to_owned();
            let v = w.slice(s![.., 4..]).to_owned();
            let m = tri_solve(&l21, &y, TriSolve::Right).unwrap();
            let (lb, d, ub) = split_ldu(&m).unwrap();
            let mut dl21 = (&ub.t().to_owned() + &d + &lb).dot(l21.matrix());
            for a in 0..4 {
                for b in (a + 1)..4 {
                    dl21[[a, b]] = 0.0;
                }
            }
            let dl22 = (&ub.t().to_owned() - &ub).dot(&l22) + &v;
            assert_eq!(post.tri_deriv(i), &dl21);
            assert_eq!(post.side_deriv(i), &dl22);
        }
    }

    #[test]
    fn derivative_is_linear_in_pre_array_derivative() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 5, 5, 2.0);
        let d1 = random_matrix(&mut rng, 5, 5, 1.0);
        let d2 = random_matrix(&mut rng, 5, 5, 1.0);
        let alpha = 0.75;
        let beta = -1.25;
        let combo = &(&d1 * alpha) + &(&d2 * beta);
        let part = ArrayPartition::new(3, 2, 2);

        let pre = Differentiated::new(a, vec![d1, d2, combo]);
        let post = post_derivative_upper(&pre, part).unwrap();
        let lin_tri =
            &(post.tri_deriv(0) * alpha) + &(post.tri_deriv(1) * beta) - post.tri_deriv(2);
        let lin_side =
            &(post.side_deriv(0) * alpha) + &(post.side_deriv(1) * beta) - post.side_deriv(2);
        let scale = max_abs_entry(post.tri_deriv(2)).max(1.0);
        assert!(max_abs_entry(&lin_tri) <= 1e-12 * scale);
        assert!(max_abs_entry(&lin_side) <= 1e-12 * scale);
    }

    #[test]
    fn structural_triangularity_of_tri_derivs() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let fam = LinearFamily::random(&mut rng, 6, 5, 2);
        let pre = fam.at(&[0.1, 0.4]);

        let part = ArrayPartition::new(4, 2, 1);
        let upper = post_derivative_upper(&pre, part).unwrap();
        for i in 0..2 {
            let d = upper.tri_deriv(i);
            for a in 0..4 {
                for b in 0..a {
                    assert_eq!(d[[a, b]], 0.0);
                }
            }
        }
        let lower = post_derivative_lower(&pre, part).unwrap();
        for i in 0..2 {
            let d = lower.tri_deriv(i);
            for a in 0..4 {
                for b in (a + 1)..4 {
                    assert_eq!(d[[a, b]], 0.0);
                }
            }
        }
    }

    #[test]
    fn singular_post_array_is_detected() {
        // First block column identically zero makes L21/R11 singular.
        let a = from_rows(&[&[0.0, 1.0], &[0.0, 2.0]]);
        let pre = DiffMatrix::constant(a, 1);
        let part = ArrayPartition::new(1, 1, 1);
        assert!(matches!(
            post_derivative_upper(&pre, part),
            Err(LinalgError::SingularPostArray { .. })
        ));
        assert!(matches!(
            post_derivative_lower(&pre, part),
            Err(LinalgError::SingularPostArray { .. })
        ));
    }

    #[test]
    fn self_check_norm_zero_for_constant_array() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let a = random_matrix(&mut rng, 4, 4, 3.0);
        let pre = DiffMatrix::constant(a, 1);
        let part = ArrayPartition::new(3, 1, 1);
        let post = post_derivative_upper(&pre, part).unwrap();
        assert!(self_check_norm(&pre, &post) <= 1e-12);
    }
}
