//! Dense triangular linear algebra and orthogonal triangularization.
//!
//! Everything in this module is a pure function of its inputs. The two
//! `triangularize_*` kernels are the workhorses of the array filters: each
//! applies Householder reflections column by column (right-to-left for the
//! lower case) and writes the structural zeros of the post-array as exact
//! zeros, not small residuals. No sign convention is enforced on the
//! triangular diagonals; [`normalize_row_signs`] exists for comparing
//! against published reference arrays.

use ndarray::Array1;

use crate::error::LinalgError;
use crate::{Matrix, Scalar, Vector};

/// Which half of a triangular factor carries the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Upper,
    Lower,
}

impl Orientation {
    fn flipped(self) -> Orientation {
        match self {
            Orientation::Upper => Orientation::Lower,
            Orientation::Lower => Orientation::Upper,
        }
    }
}

/// Which triangular system [`tri_solve`] resolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriSolve {
    /// `T · X = B`
    Left,
    /// `Tᵀ · X = B`
    LeftTransposed,
    /// `X · T = B`
    Right,
}

/// A square triangular matrix whose off-half is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularFactor<T> {
    matrix: Matrix<T>,
    orientation: Orientation,
}

impl<T: Scalar> TriangularFactor<T> {
    /// Wraps a matrix after verifying the off-triangle is exactly zero.
    pub fn new(matrix: Matrix<T>, orientation: Orientation) -> Result<Self, LinalgError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LinalgError::dims(format!(
                "triangular factor must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if !is_exactly_triangular(&matrix, orientation) {
            return Err(LinalgError::dims(
                "off-triangle entries are not exactly zero",
            ));
        }
        Ok(TriangularFactor {
            matrix,
            orientation,
        })
    }

    /// Wraps a matrix known to be triangular by construction.
    pub fn from_parts_unchecked(matrix: Matrix<T>, orientation: Orientation) -> Self {
        debug_assert!(is_exactly_triangular(&matrix, orientation));
        TriangularFactor {
            matrix,
            orientation,
        }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    /// The transposed factor (orientation flips).
    pub fn transposed(&self) -> TriangularFactor<T> {
        TriangularFactor {
            matrix: self.matrix.t().to_owned(),
            orientation: self.orientation.flipped(),
        }
    }

    /// True if every diagonal entry is a normal, nonzero float.
    pub fn is_nonsingular(&self) -> bool {
        self.matrix.diag().iter().all(|d| d.is_normal())
    }
}

fn is_exactly_triangular<T: Scalar>(m: &Matrix<T>, orientation: Orientation) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            let off = match orientation {
                Orientation::Upper => i > j,
                Orientation::Lower => i < j,
            };
            if off && m[[i, j]] != T::zero() {
                return false;
            }
        }
    }
    true
}

/// An orthogonal transformation produced by triangularization.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalFactor<T> {
    matrix: Matrix<T>,
}

impl<T: Scalar> OrthogonalFactor<T> {
    fn from_product(matrix: Matrix<T>) -> Self {
        let q = OrthogonalFactor { matrix };
        debug_assert!(q.orthogonality_defect() <= orth_tol::<T>() * crate::from_f64(10.0));
        q
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    /// `max |QQᵀ − I|` over all entries.
    pub fn orthogonality_defect(&self) -> T {
        let prod = self.matrix.dot(&self.matrix.t());
        let n = prod.nrows();
        let mut worst = T::zero();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((prod[[i, j]] - target).abs());
            }
        }
        worst
    }
}

/// Largest absolute entry.
pub fn max_abs_entry<T: Scalar>(m: &Matrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Induced infinity norm (maximum absolute row sum).
pub fn inf_norm<T: Scalar>(m: &Matrix<T>) -> T {
    let mut worst = T::zero();
    for row in m.rows() {
        let sum = row.iter().map(|v| v.abs()).sum::<T>();
        worst = worst.max(sum);
    }
    worst
}

/// Symmetry tolerance, ~1e-12 in f64, scaling with the working precision.
pub(crate) fn sym_tol<T: Scalar>() -> T {
    T::epsilon() * crate::from_f64(4096.0)
}

/// Orthogonality tolerance for produced factors, ~1e-12 in f64.
pub(crate) fn orth_tol<T: Scalar>() -> T {
    T::epsilon() * crate::from_f64(4096.0)
}

fn check_symmetric<T: Scalar>(s: &Matrix<T>) -> Result<(), LinalgError> {
    if s.nrows() != s.ncols() {
        return Err(LinalgError::dims(format!(
            "expected square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let tol = sym_tol::<T>() * T::one().max(max_abs_entry(s));
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            if (s[[i, j]] - s[[j, i]]).abs() > tol {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Cholesky factorization `S = Uᵀ U` with `U` upper triangular and a
/// strictly positive diagonal.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] on the first
/// non-positive pivot, which identifies an invalid model covariance.
pub fn cholesky_upper<T: Scalar>(s: &Matrix<T>) -> Result<TriangularFactor<T>, LinalgError> {
    check_symmetric(s)?;
    let n = s.nrows();
    let mut u = Matrix::<T>::zeros((n, n));
    for j in 0..n {
        let mut pivot = s[[j, j]];
        for k in 0..j {
            pivot = pivot - u[[k, j]] * u[[k, j]];
        }
        if !(pivot > T::zero()) || !pivot.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { minor: j + 1 });
        }
        let d = pivot.sqrt();
        u[[j, j]] = d;
        for i in (j + 1)..n {
            let mut acc = s[[j, i]];
            for k in 0..j {
                acc = acc - u[[k, j]] * u[[k, i]];
            }
            u[[j, i]] = acc / d;
        }
    }
    Ok(TriangularFactor::from_parts_unchecked(u, Orientation::Upper))
}

/// Semidefinite Cholesky `S = Uᵀ U` that tolerates exactly-zero pivots.
///
/// A pivot within roundoff of zero produces a zero row in `U`, provided the
/// remainder of its column is also negligible; used for drawing samples
/// from possibly singular covariances. Filters use [`cholesky_upper`].
pub fn cholesky_upper_psd<T: Scalar>(s: &Matrix<T>) -> Result<TriangularFactor<T>, LinalgError> {
    check_symmetric(s)?;
    let n = s.nrows();
    let scale = T::one().max(max_abs_entry(s));
    let tol = sym_tol::<T>() * scale;
    let mut u = Matrix::<T>::zeros((n, n));
    for j in 0..n {
        let mut pivot = s[[j, j]];
        for k in 0..j {
            pivot = pivot - u[[k, j]] * u[[k, j]];
        }
        if pivot < -tol || !pivot.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { minor: j + 1 });
        }
        if pivot <= tol {
            // Rank-deficient column: the rest of it must vanish too.
            for i in (j + 1)..n {
                let mut acc = s[[j, i]];
                for k in 0..j {
                    acc = acc - u[[k, j]] * u[[k, i]];
                }
                if acc.abs() > tol * crate::from_f64(16.0) {
                    return Err(LinalgError::NotPositiveDefinite { minor: j + 1 });
                }
            }
            continue;
        }
        let d = pivot.sqrt();
        u[[j, j]] = d;
        for i in (j + 1)..n {
            let mut acc = s[[j, i]];
            for k in 0..j {
                acc = acc - u[[k, j]] * u[[k, i]];
            }
            u[[j, i]] = acc / d;
        }
    }
    Ok(TriangularFactor::from_parts_unchecked(u, Orientation::Upper))
}

/// Forward-mode derivative of [`cholesky_upper`].
///
/// Given `U` with `UᵀU = S` and a symmetric `dS`, returns the upper
/// triangular `dU` satisfying `dUᵀU + UᵀdU = dS`, computed as
/// `dU = Φ(U⁻ᵀ·dS·U⁻¹)·U` where `Φ` keeps the strictly upper part plus
/// half the diagonal.
pub fn cholesky_derivative<T: Scalar>(
    u: &TriangularFactor<T>,
    ds: &Matrix<T>,
) -> Result<Matrix<T>, LinalgError> {
    if u.orientation() != Orientation::Upper {
        return Err(LinalgError::dims("cholesky_derivative expects an upper factor"));
    }
    let n = u.order();
    if ds.nrows() != n || ds.ncols() != n {
        return Err(LinalgError::dims(format!(
            "derivative shape {}x{} does not match factor order {}",
            ds.nrows(),
            ds.ncols(),
            n
        )));
    }
    // C = U^-T dS U^-1, symmetric.
    let w = tri_solve(u, ds, TriSolve::LeftTransposed)?;
    let c = tri_solve(u, &w, TriSolve::Right)?;
    let mut phi = Matrix::<T>::zeros((n, n));
    let half = crate::from_f64::<T>(0.5);
    for i in 0..n {
        phi[[i, i]] = c[[i, i]] * half;
        for j in (i + 1)..n {
            phi[[i, j]] = c[[i, j]];
        }
    }
    Ok(phi.dot(u.matrix()))
}

/// Derivative of a matrix inverse: `d(M⁻¹) = −M⁻¹·dM·M⁻¹`.
pub fn inverse_derivative<T: Scalar>(
    m: &Matrix<T>,
    dm: &Matrix<T>,
) -> Result<Matrix<T>, LinalgError> {
    if m.shape() != dm.shape() {
        return Err(LinalgError::dims("inverse_derivative shape mismatch"));
    }
    let mi = invert(m)?;
    Ok(-mi.dot(dm).dot(&mi))
}

/// Dense inverse via LU with partial pivoting.
pub fn invert<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(LinalgError::dims("invert expects a square matrix"));
    }
    let mut lu = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = T::one().max(max_abs_entry(m));
    let tiny = T::epsilon() * scale * crate::from_f64(n.max(1) as f64);
    for col in 0..n {
        let mut max_val = lu[[perm[col], col]].abs();
        let mut max_row = col;
        for row in (col + 1)..n {
            let v = lu[[perm[row], col]].abs();
            if v > max_val {
                max_val = v;
                max_row = row;
            }
        }
        if !(max_val > tiny) {
            return Err(LinalgError::SingularMatrix);
        }
        perm.swap(col, max_row);
        let pivot = lu[[perm[col], col]];
        for row in (col + 1)..n {
            let factor = lu[[perm[row], col]] / pivot;
            lu[[perm[row], col]] = factor;
            for k in (col + 1)..n {
                let v = lu[[perm[col], k]];
                lu[[perm[row], k]] = lu[[perm[row], k]] - factor * v;
            }
        }
    }
    let mut inv = Matrix::<T>::zeros((n, n));
    for rhs in 0..n {
        // forward: L y = P e_rhs
        let mut y = Array1::<T>::zeros(n);
        for i in 0..n {
            let mut acc = if perm[i] == rhs { T::one() } else { T::zero() };
            for j in 0..i {
                acc = acc - lu[[perm[i], j]] * y[j];
            }
            y[i] = acc;
        }
        // backward: U x = y
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..n {
                acc = acc - lu[[perm[i], j]] * inv[[j, rhs]];
            }
            inv[[i, rhs]] = acc / lu[[perm[i], i]];
        }
    }
    Ok(inv)
}

/// Splits a square matrix into strictly lower, diagonal and strictly upper
/// parts whose sum reassembles the input bitwise.
pub fn split_ldu<T: Scalar>(
    m: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), LinalgError> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(LinalgError::dims("split_ldu expects a square matrix"));
    }
    let mut lower = Matrix::<T>::zeros((n, n));
    let mut diag = Matrix::<T>::zeros((n, n));
    let mut upper = Matrix::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let v = m[[i, j]];
            if i > j {
                lower[[i, j]] = v;
            } else if i == j {
                diag[[i, j]] = v;
            } else {
                upper[[i, j]] = v;
            }
        }
    }
    Ok((lower, diag, upper))
}

fn check_solve_diag<T: Scalar>(t: &TriangularFactor<T>) -> Result<(), LinalgError> {
    for (i, d) in t.matrix().diag().iter().enumerate() {
        if !d.is_normal() {
            return Err(LinalgError::SingularTriangular { index: i });
        }
    }
    Ok(())
}

/// Solves a triangular system by substitution.
///
/// A zero or subnormal diagonal is a hard [`LinalgError::SingularTriangular`]
/// error that must reach the caller: it signals filter breakdown.
pub fn tri_solve<T: Scalar>(
    t: &TriangularFactor<T>,
    b: &Matrix<T>,
    mode: TriSolve,
) -> Result<Matrix<T>, LinalgError> {
    check_solve_diag(t)?;
    let n = t.order();
    let tm = t.matrix();
    match mode {
        TriSolve::Left | TriSolve::LeftTransposed => {
            if b.nrows() != n {
                return Err(LinalgError::dims(format!(
                    "solve rhs has {} rows, factor order is {}",
                    b.nrows(),
                    n
                )));
            }
            // Effective orientation of the matrix actually applied to X.
            let lower_like = match (t.orientation(), mode) {
                (Orientation::Lower, TriSolve::Left) => true,
                (Orientation::Upper, TriSolve::Left) => false,
                (Orientation::Upper, TriSolve::LeftTransposed) => true,
                (Orientation::Lower, TriSolve::LeftTransposed) => false,
                _ => unreachable!(),
            };
            let transposed = matches!(mode, TriSolve::LeftTransposed);
            let entry = |i: usize, j: usize| if transposed { tm[[j, i]] } else { tm[[i, j]] };
            let mut x = b.clone();
            let cols = b.ncols();
            for c in 0..cols {
                if lower_like {
                    for i in 0..n {
                        let mut acc = x[[i, c]];
                        for j in 0..i {
                            acc = acc - entry(i, j) * x[[j, c]];
                        }
                        x[[i, c]] = acc / entry(i, i);
                    }
                } else {
                    for i in (0..n).rev() {
                        let mut acc = x[[i, c]];
                        for j in (i + 1)..n {
                            acc = acc - entry(i, j) * x[[j, c]];
                        }
                        x[[i, c]] = acc / entry(i, i);
                    }
                }
            }
            Ok(x)
        }
        TriSolve::Right => {
            // X T = B  <=>  Tᵀ Xᵀ = Bᵀ
            if b.ncols() != n {
                return Err(LinalgError::dims(format!(
                    "solve rhs has {} cols, factor order is {}",
                    b.ncols(),
                    n
                )));
            }
            let bt = b.t().to_owned();
            let xt = tri_solve(t, &bt, TriSolve::LeftTransposed)?;
            Ok(xt.t().to_owned())
        }
    }
}

/// Vector convenience wrapper over [`tri_solve`].
pub fn tri_solve_vec<T: Scalar>(
    t: &TriangularFactor<T>,
    b: &Vector<T>,
    mode: TriSolve,
) -> Result<Vector<T>, LinalgError> {
    let bm = b
        .view()
        .into_shape_with_order((b.len(), 1))
        .expect("vector reshape")
        .to_owned();
    let x = tri_solve(t, &bm, mode)?;
    Ok(x.column(0).to_owned())
}

/// Householder reflection over `x`, aimed at the first or last coordinate.
/// Returns `None` when the off-pivot part is exactly zero (identity case).
fn householder<T: Scalar>(x: &[T], to_last: bool) -> Option<(Vec<T>, T)> {
    let n = x.len();
    let pivot = if to_last { n - 1 } else { 0 };
    let tail_zero = x
        .iter()
        .enumerate()
        .all(|(i, v)| i == pivot || *v == T::zero());
    if tail_zero {
        return None;
    }
    let norm = x.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let mut v = x.to_vec();
    let sign = if x[pivot] >= T::zero() { T::one() } else { -T::one() };
    v[pivot] = v[pivot] + sign * norm;
    let vtv = v.iter().map(|w| *w * *w).sum::<T>();
    let beta = crate::from_f64::<T>(2.0) / vtv;
    Some((v, beta))
}

/// Applies `H = I − β v vᵀ` to rows `r0..r0+v.len()` of column `col`.
fn apply_reflection_col<T: Scalar>(a: &mut Matrix<T>, v: &[T], beta: T, r0: usize, col: usize) {
    let mut w = T::zero();
    for (i, vi) in v.iter().enumerate() {
        w = w + *vi * a[[r0 + i, col]];
    }
    let bw = beta * w;
    for (i, vi) in v.iter().enumerate() {
        a[[r0 + i, col]] = a[[r0 + i, col]] - bw * *vi;
    }
}

fn validate_partition<T: Scalar>(a: &Matrix<T>, s: usize) -> Result<(), LinalgError> {
    if s == 0 {
        return Err(LinalgError::dims("triangular block order s must be >= 1"));
    }
    if s > a.nrows() || s > a.ncols() {
        return Err(LinalgError::dims(format!(
            "block order {} exceeds pre-array shape {}x{}",
            s,
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Orthogonal triangularization `QA = R` with the leading `s` columns upper
/// triangular: `R[..s, ..s]` is upper triangular and `R[s.., ..s]` is
/// exactly zero.
pub fn triangularize_upper<T: Scalar>(
    a: &Matrix<T>,
    s: usize,
) -> Result<(OrthogonalFactor<T>, Matrix<T>), LinalgError> {
    validate_partition(a, s)?;
    let rows = a.nrows();
    let cols = a.ncols();
    let mut r = a.clone();
    let mut q = Matrix::<T>::eye(rows);
    for j in 0..s {
        let x: Vec<T> = (j..rows).map(|i| r[[i, j]]).collect();
        if let Some((v, beta)) = householder(&x, false) {
            for c in j..cols {
                apply_reflection_col(&mut r, &v, beta, j, c);
            }
            for c in 0..rows {
                apply_reflection_col(&mut q, &v, beta, j, c);
            }
        }
        for i in (j + 1)..rows {
            r[[i, j]] = T::zero();
        }
    }
    Ok((OrthogonalFactor::from_product(q), r))
}

/// Orthogonal triangularization `QA = L` with the leading `s` columns lower
/// triangular at the bottom: with `k = rows − s`, `L[k.., ..s]` is lower
/// triangular and `L[..k, ..s]` is exactly zero. Columns are processed
/// right-to-left so each reflection preserves the zeros already created.
pub fn triangularize_lower<T: Scalar>(
    a: &Matrix<T>,
    s: usize,
) -> Result<(OrthogonalFactor<T>, Matrix<T>), LinalgError> {
    validate_partition(a, s)?;
    let rows = a.nrows();
    let cols = a.ncols();
    let k = rows - s;
    let mut l = a.clone();
    let mut q = Matrix::<T>::eye(rows);
    for j in (0..s).rev() {
        let hi = k + j + 1;
        let x: Vec<T> = (0..hi).map(|i| l[[i, j]]).collect();
        if let Some((v, beta)) = householder(&x, true) {
            // Columns j+1..s already hold exact zeros in rows 0..hi.
            for c in (0..=j).chain(s..cols) {
                apply_reflection_col(&mut l, &v, beta, 0, c);
            }
            for c in 0..rows {
                apply_reflection_col(&mut q, &v, beta, 0, c);
            }
        }
        for i in 0..(hi - 1) {
            l[[i, j]] = T::zero();
        }
    }
    Ok((OrthogonalFactor::from_product(q), l))
}

/// Rescales rows of a post-array (and the matching rows of its derivatives)
/// by ±1 so that the triangular diagonal matches the signs of `reference`.
///
/// The diagonal of the triangular block sits at `(i, i)` for the upper
/// orientation and at `(k + i, i)` for the lower one; rows outside the
/// triangular block keep their sign. Valid for derivative comparison since
/// `(D·R)' = D·R'` for a constant `D`.
pub fn normalize_row_signs<T: Scalar>(
    post: &mut Matrix<T>,
    derivs: &mut [Matrix<T>],
    reference: &Matrix<T>,
    orientation: Orientation,
    s: usize,
) {
    let rows = post.nrows();
    let k = rows - s;
    for row in 0..rows {
        let col = match orientation {
            Orientation::Upper => {
                if row < s {
                    row
                } else {
                    continue;
                }
            }
            Orientation::Lower => {
                if row >= k {
                    row - k
                } else {
                    continue;
                }
            }
        };
        let ours = post[[row, col]];
        let theirs = reference[[row, col]];
        if ours * theirs < T::zero() {
            for c in 0..post.ncols() {
                post[[row, c]] = -post[[row, c]];
            }
            for d in derivs.iter_mut() {
                for c in 0..d.ncols() {
                    d[[row, c]] = -d[[row, c]];
                }
            }
        }
    }
}

/// Column-major flatten helper for tests and reports.
pub fn from_rows<T: Scalar>(rows: &[&[T]]) -> Matrix<T> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    let mut m = Matrix::<T>::zeros((r, c));
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), c, "ragged rows");
        for (j, v) in row.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}
