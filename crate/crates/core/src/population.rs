//! ℓ1-iOT on exact Gaussian moments: `min_A λ‖A‖₁ − ⟨A, Σ̂⟩ + W(A)`.
//!
//! `W` is the Gaussian closed form, so this is the `n → ∞` counterpart of the
//! sample problem solved in [`crate::iot`]. Solved by proximal Newton with a
//! coordinate-descent inner loop and a backtracking line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eot::CostVector;
use crate::error::{input, IotError, Result};
use crate::gaussian::{cross_covariance, gaussian_hessian, gaussian_w, GaussianModel};
use crate::iot::optimality_residual;
use crate::linalg::soft;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub lambda: f64,
    /// Stop when the ℓ1 optimality residual is below `tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_sweeps: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            tol: 1e-10,
            max_iter: 200,
            max_sweeps: 5000,
        }
    }
}

impl PopulationConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSolution {
    pub a: DMatrix<f64>,
    /// `λ‖A‖₁ − ⟨A, Σ̂⟩ + W(A)`
    pub objective: f64,
    pub z_lambda: Vec<f64>,
    pub optimality_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PopulationSolution {
    pub fn cost_vector(&self) -> CostVector {
        CostVector::from_matrix(&self.a)
    }
}

/// `λ‖A‖₁ − ⟨A, Σ̂⟩ + W(A)` for the covariances and `ε` of `model`; `model.a` is ignored.
pub fn population_objective(model: &GaussianModel, moments: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let w = gaussian_w(&model.with_a(a.clone()))?;
    Ok(lambda * a.iter().map(|v| v.abs()).sum::<f64>() - a.dot(moments) + w)
}

/// Solve on the exact moments `Σ̂ = Σ(model.a)` of the model's own coupling.
pub fn solve_on_model(model: &GaussianModel, config: &PopulationConfig) -> Result<PopulationSolution> {
    let moments = cross_covariance(model)?;
    solve_population(model, &moments, config)
}

/// Solve with arbitrary target moments; `model` supplies `Σ_α`, `Σ_β` and `ε`.
pub fn solve_population(model: &GaussianModel, moments: &DMatrix<f64>, config: &PopulationConfig) -> Result<PopulationSolution> {
    model.validate()?;
    let (d1, d2) = model.dims();
    if moments.shape() != (d1, d2) {
        return input(format!("moments must be {d1}x{d2}"));
    }
    let lambda = config.lambda;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return input(format!("lambda must be finite and non-negative, got {lambda}"));
    }
    let s = d1 * d2;
    let target = DVector::from_column_slice(moments.as_slice());
    let at = |a: &DVector<f64>| model.with_a(DMatrix::from_column_slice(d1, d2, a.as_slice()));
    let value = |a: &DVector<f64>| -> Result<f64> {
        let w = gaussian_w(&at(a))?;
        Ok(lambda * a.lp_norm(1) - a.dot(&target) + w)
    };
    let gradient = |a: &DVector<f64>| -> Result<DVector<f64>> {
        let sigma = cross_covariance(&at(a))?;
        Ok(DVector::from_column_slice(sigma.as_slice()) - &target)
    };

    let mut a = DVector::zeros(s);
    let mut f = value(&a)?;
    let mut g = gradient(&a)?;
    let mut residual = optimality_residual(a.as_slice(), g.as_slice(), lambda);
    let mut iterations = 0;
    while residual > config.tol && iterations < config.max_iter {
        let h = gaussian_hessian(&at(&a))?;
        let d = newton_direction(&h, &g, &a, lambda, config.max_sweeps);
        let decrease = g.dot(&d) + lambda * ((&a + &d).lp_norm(1) - a.lp_norm(1));
        if !(decrease < 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        if decrease.abs() <= 1e-13 * (1.0 + f.abs()) {
            // The predicted decrease is below the resolution of f: judge the
            // full step by the residual instead.
            let trial = &a + &d;
            if let (Ok(ft), Ok(gt)) = (value(&trial), gradient(&trial)) {
                if optimality_residual(trial.as_slice(), gt.as_slice(), lambda) < residual {
                    accepted = Some((trial, ft));
                }
            }
        }
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let trial = &a + &d * t;
            if let Ok(ft) = value(&trial) {
                if ft <= f + 1e-4 * t * decrease {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, fnext)) = accepted else {
            break;
        };
        a = next;
        f = fnext;
        g = gradient(&a)?;
        residual = optimality_residual(a.as_slice(), g.as_slice(), lambda);
        iterations += 1;
    }
    let z_lambda = if lambda > 0.0 {
        g.iter().map(|v| -v / lambda).collect()
    } else {
        vec![0.0; s]
    };
    let converged = residual <= config.tol;
    if !converged {
        log::debug!("population solve stopped with residual {residual:e} after {iterations} steps");
    }
    Ok(PopulationSolution {
        a: DMatrix::from_column_slice(d1, d2, a.as_slice()),
        objective: f,
        z_lambda,
        optimality_residual: residual,
        converged,
        iterations,
    })
}

/// Minimizes `gᵀd + ½ dᵀHd + λ‖a + d‖₁` by cyclic coordinate descent.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, a: &DVector<f64>, lambda: f64, max_sweeps: usize) -> DVector<f64> {
    let s = a.len();
    let mut d = DVector::zeros(s);
    let mut hd = DVector::zeros(s);
    let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        let mut biggest = 0.0f64;
        for j in 0..s {
            let hjj = h[(j, j)];
            let lin = g[j] + hd[j] - hjj * d[j];
            let u = soft(a[j] - lin / hjj, lambda / hjj);
            let step = u - a[j] - d[j];
            if step != 0.0 {
                d[j] += step;
                hd.axpy(step, &h.column(j), 1.0);
                biggest = biggest.max(step.abs() * hjj);
            }
        }
        if biggest <= 1e-15 * scale * (1.0 + a.amax()) {
            break;
        }
    }
    d
}

impl From<&PopulationSolution> for IotError {
    fn from(s: &PopulationSolution) -> Self {
        IotError::Convergence {
            iterations: s.iterations,
            residual: s.optimality_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(eps: f64) -> GaussianModel {
        GaussianModel::standard(DMatrix::from_element(1, 1, 1.0), eps).unwrap()
    }

    #[test]
    fn zero_lambda_recovers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let sa = &b * b.transpose() + DMatrix::identity(2, 2);
        let model = GaussianModel::new(sa, DMatrix::identity(3, 3), a.clone(), 0.7).unwrap();
        let sol = solve_on_model(&model, &PopulationConfig::new(0.0)).unwrap();
        assert!(sol.converged);
        assert!((sol.a - a).amax() < 1e-9);
    }

    #[test]
    fn scalar_against_bisection() {
        // d/da [λ|a| − aσ̂ + W(a)] = λ sign(a) − σ̂ + Σ(a); Σ is increasing in a.
        let eps = 1.5;
        let model = scalar_model(eps);
        let sigma_hat = 0.5;
        let lambda = 0.1;
        let sigma = |a: f64| cross_covariance(&model.with_a(DMatrix::from_element(1, 1, a))).unwrap()[(0, 0)];
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if lambda - sigma_hat + sigma(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let sol = solve_population(&model, &DMatrix::from_element(1, 1, sigma_hat), &PopulationConfig::new(lambda)).unwrap();
        assert!((sol.a[(0, 0)] - 0.5 * (lo + hi)).abs() < 1e-10);
        assert!((sol.z_lambda[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn null_threshold_gives_zero() {
        let model = GaussianModel::standard(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, -0.5]), 1.0).unwrap();
        let moments = cross_covariance(&model).unwrap();
        let sol = solve_population(&model, &moments, &PopulationConfig::new(moments.amax() * 1.001)).unwrap();
        assert_eq!(sol.a, DMatrix::zeros(2, 2));
        let sol = solve_population(&model, &moments, &PopulationConfig::new(moments.amax() * 0.9)).unwrap();
        assert!(sol.a.amax() > 0.0);
    }

    /// Proximal gradient with step `1/L`, using only `Σ(A)` as the gradient.
    fn prox_gradient_oracle(model: &GaussianModel, moments: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let lip = 1.0 / model.eps;
        let mut a = DMatrix::zeros(moments.nrows(), moments.ncols());
        for _ in 0..20000 {
            let g = cross_covariance(&model.with_a(a.clone())).unwrap() - moments;
            a = (&a - g / lip).map(|v| soft(v, lambda / lip));
        }
        a
    }

    #[test]
    fn matches_prox_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let truth = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.5..1.5));
            let model = GaussianModel::standard(truth, rng.gen_range(0.5..2.0)).unwrap();
            let moments = cross_covariance(&model).unwrap();
            let lambda = 0.3 * moments.amax();
            let sol = solve_population(&model, &moments, &PopulationConfig::new(lambda)).unwrap();
            let oracle = prox_gradient_oracle(&model, &moments, lambda);
            assert!((&sol.a - &oracle).amax() < 1e-8, "{} vs {}", sol.a, oracle);
            let fo = population_objective(&model, &moments, &oracle, lambda).unwrap();
            assert!(sol.objective <= fo + 1e-12);
        }
    }

    #[test]
    fn kkt_holds_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = DMatrix::from_fn(3, 3, |_, _| if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let model = GaussianModel::standard(truth, 0.4).unwrap();
        let sol = solve_on_model(&model, &PopulationConfig::new(0.02)).unwrap();
        assert!(sol.converged);
        let cv = sol.cost_vector();
        assert!(sol.z_lambda.iter().all(|z| z.abs() <= 1.0 + 1e-6));
        for &i in cv.support() {
            assert!((sol.z_lambda[i] - cv.signs()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn small_eps_stays_accurate() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let eps = 1e-3;
        let model = GaussianModel::standard(a.clone(), eps).unwrap();
        let sol = solve_on_model(&model, &PopulationConfig::new(0.0)).unwrap();
        assert!((sol.a - a).amax() < 1e-6);
    }
}
