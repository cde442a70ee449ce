//! Reference solvers for the two limits of Gaussian ℓ1-iOT.
//!
//! `ε → ∞` (with `λ = λ₀/ε`) gives the Lasso
//! `λ₀‖A‖₁ + ½‖(Σ_β^{1/2} ⊗ Σ_α^{1/2})(A − Â)‖²`, and `ε → 0` (with `λ = λ₀ε`,
//! symmetric positive definite `Â`) gives the graphical lasso
//! `λ₀‖A‖₁ − ½ log det A + ½⟨A, Â⁻¹⟩`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eot::CostVector;
use crate::error::{input, IotError, Result};
use crate::iot::optimality_residual;
use crate::linalg::{asymmetry, check_spd, min_eigenvalue, soft, symmetrize};

/// Smallest eigenvalue a glasso iterate may have.
pub const CONE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitKind {
    Lasso,
    Glasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitProblemSpec {
    pub kind: LimitKind,
    pub sigma_alpha: DMatrix<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub lambda0: f64,
}

impl LimitProblemSpec {
    pub fn lasso(sigma_alpha: DMatrix<f64>, sigma_beta: DMatrix<f64>, a_hat: DMatrix<f64>, lambda0: f64) -> Result<Self> {
        let spec = Self {
            kind: LimitKind::Lasso,
            sigma_alpha,
            sigma_beta,
            a_hat,
            lambda0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn glasso(a_hat: DMatrix<f64>, lambda0: f64) -> Result<Self> {
        let d = a_hat.nrows();
        let spec = Self {
            kind: LimitKind::Glasso,
            sigma_alpha: DMatrix::identity(d, d),
            sigma_beta: DMatrix::identity(a_hat.ncols(), a_hat.ncols()),
            a_hat,
            lambda0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        // λ₀ = 0 is accepted: it is the unpenalized reference point.
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return input(format!("lambda0 must be finite and non-negative, got {}", self.lambda0));
        }
        match self.kind {
            LimitKind::Lasso => {
                check_spd(&self.sigma_alpha, "sigma_alpha")?;
                check_spd(&self.sigma_beta, "sigma_beta")?;
                if self.a_hat.shape() != (self.sigma_alpha.nrows(), self.sigma_beta.nrows()) {
                    return input("A_hat shape does not match the covariances");
                }
            }
            LimitKind::Glasso => {
                if !self.a_hat.is_square() || asymmetry(&self.a_hat) > 1e-12 * (1.0 + self.a_hat.amax()) {
                    return input("glasso needs a symmetric A_hat");
                }
                check_spd(&self.a_hat, "A_hat")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitSolution {
    pub a: DMatrix<f64>,
    pub objective: f64,
    /// Duality gap for the Lasso, ℓ1 optimality residual for the glasso.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LimitSolution {
    pub fn cost_vector(&self) -> CostVector {
        CostVector::from_matrix(&self.a)
    }
}

pub fn lasso_objective(spec: &LimitProblemSpec, a: &DMatrix<f64>) -> f64 {
    let diff = a - &spec.a_hat;
    // ‖(Σ_β^{1/2} ⊗ Σ_α^{1/2}) vec D‖² = ⟨D, Σ_α D Σ_β⟩
    let quad = diff.dot(&(&spec.sigma_alpha * &diff * &spec.sigma_beta));
    spec.lambda0 * a.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * quad
}

/// Cyclic coordinate descent, stopped on the duality gap.
pub fn lasso_solve(spec: &LimitProblemSpec, tol: f64) -> Result<LimitSolution> {
    if spec.kind != LimitKind::Lasso {
        return input("lasso_solve needs a lasso problem");
    }
    spec.validate()?;
    let (d1, d2) = spec.a_hat.shape();
    let q = spec.sigma_beta.kronecker(&spec.sigma_alpha);
    let a_hat = DVector::from_column_slice(spec.a_hat.as_slice());
    let lambda = spec.lambda0;
    let s = a_hat.len();
    let mut a = DVector::zeros(s);
    // grad = Q(a − â)
    let mut grad = -(&q * &a_hat);
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let max_iter = 100_000;
    while iterations < max_iter {
        for j in 0..s {
            let qjj = q[(j, j)];
            let new = soft(a[j] - grad[j] / qjj, lambda / qjj);
            let step = new - a[j];
            if step != 0.0 {
                a[j] = new;
                grad.axpy(step, &q.column(j), 1.0);
            }
        }
        iterations += 1;
        gap = lasso_gap(&q, &a, &a_hat, &grad, lambda);
        if gap <= tol {
            break;
        }
    }
    let am = DMatrix::from_column_slice(d1, d2, a.as_slice());
    Ok(LimitSolution {
        objective: lasso_objective(spec, &am),
        a: am,
        residual: gap,
        converged: gap <= tol,
        iterations,
    })
}

/// Gap between the primal and the dual `max_θ ⟨θ, Q â⟩ − ½ θᵀQθ, ‖Qθ‖∞ ≤ λ`
/// at the rescaled residual `θ = (â − a)·min(1, λ/‖grad‖∞)`.
fn lasso_gap(q: &DMatrix<f64>, a: &DVector<f64>, a_hat: &DVector<f64>, grad: &DVector<f64>, lambda: f64) -> f64 {
    let diff = a - a_hat;
    let primal = lambda * a.lp_norm(1) + 0.5 * diff.dot(&(q * &diff));
    let gmax = grad.amax();
    let scale = if gmax > lambda { lambda / gmax } else { 1.0 };
    let theta = -diff * scale;
    let qtheta = q * &theta;
    let dual = theta.dot(&(q * a_hat)) - 0.5 * theta.dot(&qtheta);
    (primal - dual).max(0.0)
}

/// `λ₀‖A‖₁ − ½ log det A + ½⟨A, Â⁻¹⟩`, infinite outside the cone.
pub fn glasso_objective(spec: &LimitProblemSpec, a: &DMatrix<f64>) -> Result<f64> {
    let inv = spec
        .a_hat
        .clone()
        .cholesky()
        .ok_or_else(|| IotError::Input("A_hat is not positive definite".into()))?
        .inverse();
    Ok(glasso_value(a, &inv, spec.lambda0))
}

fn glasso_value(a: &DMatrix<f64>, a_hat_inv: &DMatrix<f64>, lambda: f64) -> f64 {
    match symmetrize(a).cholesky() {
        Some(c) => {
            let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            lambda * a.iter().map(|v| v.abs()).sum::<f64>() - 0.5 * logdet + 0.5 * a.dot(a_hat_inv)
        }
        None => f64::INFINITY,
    }
}

/// Proximal gradient over symmetric matrices, kept inside the positive
/// definite cone by step halving.
pub fn glasso_solve(spec: &LimitProblemSpec, tol: f64) -> Result<LimitSolution> {
    if spec.kind != LimitKind::Glasso {
        return input("glasso_solve needs a glasso problem");
    }
    spec.validate()?;
    let lambda = spec.lambda0;
    let a_hat_inv = symmetrize(&spec.a_hat.clone().cholesky().expect("validated").inverse());
    let smooth_grad = |a: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let inv = symmetrize(a).cholesky()?.inverse();
        Some((&a_hat_inv - symmetrize(&inv)) * 0.5)
    };
    let mut a = symmetrize(&spec.a_hat);
    let mut f = glasso_value(&a, &a_hat_inv, lambda);
    let mut g = smooth_grad(&a).expect("A_hat is positive definite");
    let mut residual = optimality_residual(a.as_slice(), g.as_slice(), lambda);
    let mut t = 2.0 * min_eigenvalue(&a).powi(2);
    let mut iterations = 0;
    let max_iter = 200_000;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    while residual > tol && iterations < max_iter {
        // Barzilai-Borwein guess, then backtrack.
        if let Some((pa, pg)) = &prev {
            let s = &a - pa;
            let y = &g - pg;
            let sy = s.dot(&y);
            if sy > 0.0 {
                t = s.dot(&s) / sy;
            }
        }
        let mut halvings = 0;
        let (next, fnext) = loop {
            let cand = symmetrize(&(&a - &g * t).map(|v| soft(v, lambda * t)));
            let fc = if min_eigenvalue(&cand) >= CONE_FLOOR {
                glasso_value(&cand, &a_hat_inv, lambda)
            } else {
                f64::INFINITY
            };
            let step = &cand - &a;
            // Sufficient decrease for the composite objective.
            let l1_a = lambda * a.iter().map(|v| v.abs()).sum::<f64>();
            let l1_c = lambda * cand.iter().map(|v| v.abs()).sum::<f64>();
            let model = f - l1_a + g.dot(&step) + step.norm_squared() / (2.0 * t) + l1_c;
            if fc <= model + 1e-14 * f.abs().max(1.0) {
                break (cand, fc);
            }
            t *= 0.5;
            halvings += 1;
            if halvings > 100 {
                return Err(IotError::Convergence {
                    iterations,
                    residual,
                });
            }
        };
        prev = Some((a, g));
        a = next;
        f = fnext;
        g = smooth_grad(&a).ok_or_else(|| IotError::Numerical("glasso iterate left the cone".into()))?;
        residual = optimality_residual(a.as_slice(), g.as_slice(), lambda);
        iterations += 1;
    }
    Ok(LimitSolution {
        a,
        objective: f,
        residual,
        converged: residual <= tol,
        iterations,
    })
}
