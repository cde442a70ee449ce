//! Dual certificates for ℓ1 support recovery.
//!
//! Given a Hessian `H` of `W` at the true parameter and its support `I`, the
//! vanilla certificate is `z = H[:, I] H[I, I]⁻¹ sign(Â)_I`; it is
//! non-degenerate when every off-support entry is strictly inside `(−1, 1)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::eot::CostVector;
use crate::error::{input, numerical, Result};
use crate::linalg::{spd_condition, symmetrize};

/// Largest condition number accepted for `H[I, I]`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub z: Vec<f64>,
    pub support: Vec<usize>,
    /// `1 − max_{i ∉ I} |z_i|`
    pub margin: f64,
    pub degenerate: bool,
}

impl Certificate {
    pub fn new(z: Vec<f64>, support: Vec<usize>) -> Self {
        let margin = nondegeneracy_margin(&z, &support);
        Self {
            z,
            support,
            margin,
            degenerate: margin <= 0.0,
        }
    }

    pub fn off_support_max(&self) -> f64 {
        1.0 - self.margin
    }
}

/// `1 − max off-support |z_i|`, or `1` when the support is everything.
pub fn nondegeneracy_margin(z: &[f64], support: &[usize]) -> f64 {
    let mut on = vec![false; z.len()];
    for &i in support {
        on[i] = true;
    }
    let worst = z
        .iter()
        .zip(&on)
        .filter(|(_, &s)| !s)
        .map(|(v, _)| v.abs())
        .fold(f64::NEG_INFINITY, f64::max);
    if worst == f64::NEG_INFINITY {
        1.0
    } else {
        1.0 - worst
    }
}

fn check_inputs(h: &DMatrix<f64>, a_hat: &CostVector) -> Result<()> {
    if !h.is_square() || h.nrows() != a_hat.len() {
        return input(format!(
            "Hessian is {}x{} but the parameter has length {}",
            h.nrows(),
            h.ncols(),
            a_hat.len()
        ));
    }
    if a_hat.support().is_empty() {
        return input("certificate needs a non-empty support");
    }
    Ok(())
}

fn support_block(h: &DMatrix<f64>, support: &[usize]) -> Result<Cholesky<f64, Dyn>> {
    let hii = symmetrize(&h.select_rows(support).select_columns(support));
    let cond = spd_condition(&hii);
    if !(cond <= MAX_CONDITION) {
        return numerical(format!(
            "Hessian block on support {support:?} is numerically singular (condition {cond:e})"
        ));
    }
    hii.cholesky()
        .ok_or_else(|| crate::IotError::Numerical(format!("Hessian block on support {support:?} is not positive definite")))
}

/// `z = H[:, I] H[I, I]⁻¹ sign(Â)_I`, with `z_I` set to the signs exactly.
pub fn vanilla_certificate(h: &DMatrix<f64>, a_hat: &CostVector) -> Result<Certificate> {
    check_inputs(h, a_hat)?;
    let support = a_hat.support().to_vec();
    let signs = a_hat.signs();
    let s_i = DVector::from_iterator(support.len(), support.iter().map(|&i| signs[i]));
    let chol = support_block(h, &support)?;
    let u = chol.solve(&s_i);
    let mut z = h.select_columns(&support) * u;
    for (&i, &s) in support.iter().zip(s_i.iter()) {
        z[i] = s;
    }
    Ok(Certificate::new(z.as_slice().to_vec(), support))
}

/// Certificate from the inverse Hessian `K = H⁻¹`: minimize `zᵀ K z` with `z_I`
/// fixed to the signs. Equivalent to [`vanilla_certificate`] with `H = K⁻¹`.
pub fn certificate_from_inverse(k: &DMatrix<f64>, a_hat: &CostVector) -> Result<Certificate> {
    check_inputs(k, a_hat)?;
    let support = a_hat.support().to_vec();
    let signs = a_hat.signs();
    let free: Vec<usize> = (0..k.nrows()).filter(|i| !support.contains(i)).collect();
    let mut z = vec![0.0; k.nrows()];
    for &i in &support {
        z[i] = signs[i];
    }
    if !free.is_empty() {
        let s_i = DVector::from_iterator(support.len(), support.iter().map(|&i| signs[i]));
        let kff = symmetrize(&k.select_rows(&free).select_columns(&free));
        let cond = spd_condition(&kff);
        if !(cond <= MAX_CONDITION) {
            return numerical(format!("inverse Hessian block off support {support:?} is singular (condition {cond:e})"));
        }
        let kfi = k.select_rows(&free).select_columns(&support);
        let zf = -kff.cholesky().expect("checked positive definite").solve(&(kfi * s_i));
        for (&i, v) in free.iter().zip(zf.iter()) {
            z[i] = *v;
        }
    }
    Ok(Certificate::new(z, support))
}

/// Minimal-norm certificate: `argmin zᵀ H⁻¹ z` over `z_I = sign(Â)_I`,
/// `‖z_{I^c}‖∞ ≤ 1`, by accelerated projected gradient.
pub fn min_norm_certificate(h: &DMatrix<f64>, a_hat: &CostVector, tol: f64) -> Result<Certificate> {
    let vanilla = vanilla_certificate(h, a_hat)?;
    let chol = symmetrize(h)
        .cholesky()
        .ok_or_else(|| crate::IotError::Numerical("Hessian is not positive definite".into()))?;
    let s = h.nrows();
    let free: Vec<usize> = (0..s).filter(|i| !vanilla.support.contains(i)).collect();
    if free.is_empty() {
        return Ok(vanilla);
    }
    let lam_min = crate::linalg::min_eigenvalue(h);
    if !(lam_min > 0.0) {
        return numerical("Hessian is not positive definite");
    }
    // ∇(zᵀ H⁻¹ z) = 2 H⁻¹ z, Lipschitz constant 2 / λ_min(H).
    let step = 0.5 * lam_min;
    let grad = |z: &DVector<f64>| chol.solve(z) * 2.0;
    let project = |z: &mut DVector<f64>| {
        for &i in &free {
            z[i] = z[i].clamp(-1.0, 1.0);
        }
    };
    let mut z = DVector::from_column_slice(&vanilla.z);
    project(&mut z);
    let mut y = z.clone();
    let mut t = 1.0f64;
    let residual = |z: &DVector<f64>| -> f64 {
        let g = grad(z);
        free.iter()
            .map(|&i| (z[i] - (z[i] - g[i]).clamp(-1.0, 1.0)).abs())
            .fold(0.0, f64::max)
    };
    let max_iter = 1_000_000;
    let mut it = 0;
    while residual(&z) > tol {
        if it == max_iter {
            return Err(crate::IotError::Convergence {
                iterations: it,
                residual: residual(&z),
            });
        }
        it += 1;
        let g = grad(&y);
        let mut next = y.clone();
        for &i in &free {
            next[i] -= step * g[i];
        }
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        // Restart momentum when the objective would increase.
        let obj = |v: &DVector<f64>| v.dot(&chol.solve(v));
        if obj(&next) > obj(&z) {
            t = 1.0;
            y = z.clone();
            continue;
        }
        y = &next + (&next - &z) * momentum;
        z = next;
        t = t_next;
    }
    Ok(Certificate::new(z.as_slice().to_vec(), vanilla.support))
}

/// `zᵀ H⁻¹ z`
pub fn certificate_energy(h: &DMatrix<f64>, z: &[f64]) -> Result<f64> {
    let chol = symmetrize(h)
        .cholesky()
        .ok_or_else(|| crate::IotError::Numerical("Hessian is not positive definite".into()))?;
    let z = DVector::from_column_slice(z);
    Ok(z.dot(&chol.solve(&z)))
}
