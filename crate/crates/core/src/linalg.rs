//! Small dense linear-algebra helpers shared by the Gaussian and certificate code.
//!
//! Matrices are vectorized column-major throughout: entry `(p, q)` of a
//! `d1 x d2` matrix sits at index `p + d1 * q`. Under this convention
//! `(B ⊗ C) vec(X) = vec(C X Bᵀ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{input, Result};

/// Eigenvalue floor used when taking symmetric square roots.
pub const EIG_FLOOR: f64 = 1e-14;

pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// The permutation `T` with `T vec(X) = vec(Xᵀ)` for `X` of shape `rows x cols`.
pub fn commutation(rows: usize, cols: usize) -> DMatrix<f64> {
    let s = rows * cols;
    let mut t = DMatrix::zeros(s, s);
    for p in 0..rows {
        for q in 0..cols {
            // X[p,q] lands at Xᵀ[q,p]
            t[(q + cols * p, p + rows * q)] = 1.0;
        }
    }
    t
}

/// Dense matrix of a linear map acting on `rows x cols` matrices.
pub fn operator_matrix<F>(rows: usize, cols: usize, op: F) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let s = rows * cols;
    let mut out = DMatrix::zeros(s, s);
    let mut e = DMatrix::zeros(rows, cols);
    for k in 0..s {
        e.as_mut_slice()[k] = 1.0;
        let col = op(&e);
        out.column_mut(k).copy_from_slice(col.as_slice());
        e.as_mut_slice()[k] = 0.0;
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Ratio of extreme eigenvalues of a symmetric matrix; `inf` when not positive definite.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return input(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return input(format!("{what} has non-finite entries"));
    }
    if asymmetry(m) > 1e-10 * (1.0 + m.amax()) {
        return input(format!("{what} is not symmetric"));
    }
    let lo = min_eigenvalue(m);
    if lo <= 1e-12 {
        return input(format!("{what} is not positive definite (min eigenvalue {lo:e})"));
    }
    Ok(())
}

fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| f(v.max(EIG_FLOOR)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Symmetric square root with eigenvalues floored at [`EIG_FLOOR`].
pub fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, f64::sqrt)
}

pub fn inv_sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |v| 1.0 / v.sqrt())
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Soft-thresholding operator.
#[inline]
pub fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
