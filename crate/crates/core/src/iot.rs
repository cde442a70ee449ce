//! ℓ1-regularized inverse OT on paired samples.
//!
//! The solver works on the semi-dual obtained from the finite-sample
//! Kantorovich objective by eliminating `G` in closed form:
//!
//! ```text
//! J(A, F) = −(1/n) Σ_i F_i − ⟨A, Φ*P̂⟩ + (ε/2n) Σ_j LSE_j + ε/2
//! LSE_j   = log((1/n) Σ_i exp(2(F_i + (ΦA)_ij)/ε)),   G*_j = −(ε/2) LSE_j
//! ```
//!
//! so that `min_F J(A, F) − ε/2 = ℒ(A)`. The ℓ1 penalty is replaced by the
//! Hadamard form `A = U ⊙ V`, `‖A‖₁ = min ½(‖U‖² + ‖V‖²)`, and everything is
//! handed to L-BFGS.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eot::{CostBasis, CostVector, SUPPORT_TOL};
use crate::error::{input, numerical, IotError, Result};
use crate::kernel::{column_softmax_pass, BilinearData};
use crate::lbfgs::{self, LbfgsOptions, Stop};

/// Largest accepted `‖z^λ‖∞ − 1` at a converged solution.
pub const KKT_SLACK: f64 = 5e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Entropic regularization in the Sinkhorn convention (density `exp(2c/ε)`).
    pub eps: f64,
    /// Tolerance on the ℓ1 optimality residual and the L1 marginal residual.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub lbfgs_memory: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eps: 1.0,
            grad_tol: 1e-8,
            max_iter: 5000,
            lbfgs_memory: 10,
            init_scale: 1e-3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn new(lambda: f64, eps: f64) -> Self {
        Self {
            lambda,
            eps,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return input(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return input(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.grad_tol > 0.0) || self.lbfgs_memory == 0 || self.init_scale <= 0.0 {
            return input("grad_tol, lbfgs_memory and init_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IotSolution {
    pub a: CostVector,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `−(1/λ) ∇ℒ(A)`; all zeros when `λ = 0`.
    pub z_lambda: Vec<f64>,
    /// `λ‖A‖₁ + ℒ(A)`
    pub objective: f64,
    pub kkt_sup: f64,
    /// Largest ℓ1 optimality violation (minimal-norm subgradient, sup norm).
    pub optimality_residual: f64,
    /// L1 distance of the row marginal of the implied coupling to uniform.
    pub marginal_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Value and gradients of the semi-dual at `(A, F)`.
#[derive(Debug, Clone)]
pub(crate) struct SemidualEval {
    pub value: f64,
    pub grad_f: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub lse: Vec<f64>,
    pub rowsum: Vec<f64>,
}

pub(crate) struct Semidual<'a> {
    basis: &'a CostBasis,
    eps: f64,
    n: usize,
    moments: DVector<f64>,
    data: Option<BilinearData>,
}

impl<'a> Semidual<'a> {
    pub fn new(basis: &'a CostBasis, eps: f64) -> Result<Self> {
        let n = basis.n_rows();
        if n != basis.n_cols() {
            return input(format!("paired-sample basis must be square, got {n}x{}", basis.n_cols()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return input(format!("eps must be positive, got {eps}"));
        }
        Ok(Self {
            basis,
            eps,
            n,
            moments: basis.empirical_moments()?,
            data: basis.kernel_data(),
        })
    }

    pub fn eval(&self, a: &[f64], f: &[f64], want_grad: bool) -> Result<SemidualEval> {
        let n = self.n;
        let nf = n as f64;
        let tau = 2.0 / self.eps;
        let (lse, rowsum, phi_q) = match &self.data {
            Some(data) => {
                let am = DMatrix::from_column_slice(data.d1, data.d2, a);
                let out = column_softmax_pass(data, &am, f, tau, want_grad);
                let phi_q = if want_grad {
                    let mut g = vec![0.0; data.d1 * data.d2];
                    for q in 0..data.d2 {
                        for p in 0..data.d1 {
                            g[p + data.d1 * q] = dot(&data.xa[p], &out.qy[q]);
                        }
                    }
                    g
                } else {
                    Vec::new()
                };
                (out.lse, out.rowsum, phi_q)
            }
            None => {
                let m = self.basis.cost(a);
                let mut lse = vec![0.0; n];
                let mut q = DMatrix::zeros(n, n);
                let ln_n = nf.ln();
                for j in 0..n {
                    let col = q.column_mut(j);
                    let mut col = col;
                    let mut top = f64::NEG_INFINITY;
                    for i in 0..n {
                        let s = tau * (f[i] + m[(i, j)]);
                        col[i] = s;
                        top = top.max(s);
                    }
                    let mut sum = 0.0;
                    for i in 0..n {
                        col[i] = (col[i] - top).exp();
                        sum += col[i];
                    }
                    col.scale_mut(1.0 / sum);
                    lse[j] = top + sum.ln() - ln_n;
                }
                let rowsum = (0..n).map(|i| q.row(i).sum()).collect();
                let phi_q = if want_grad {
                    self.basis.adjoint(&q).as_slice().to_vec()
                } else {
                    Vec::new()
                };
                (lse, rowsum, phi_q)
            }
        };
        let value = -f.iter().sum::<f64>() / nf - dot(a, self.moments.as_slice())
            + 0.5 * self.eps * lse.iter().sum::<f64>() / nf
            + 0.5 * self.eps;
        if !value.is_finite() || lse.iter().any(|v| !v.is_finite()) {
            return numerical(format!("semi-dual overflow at eps = {}", self.eps));
        }
        let (grad_f, grad_a) = if want_grad {
            (
                rowsum.iter().map(|r| (r - 1.0) / nf).collect(),
                phi_q.iter().zip(self.moments.iter()).map(|(g, m)| g / nf - m).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(SemidualEval {
            value,
            grad_f,
            grad_a,
            lse,
            rowsum,
        })
    }

    /// Exact row updates `F ← F − (ε/2) log(rowsum)`: Sinkhorn on the semi-dual.
    pub fn sinkhorn_f(&self, a: &[f64], f: &mut [f64], tol: f64, max_iter: usize) -> Result<SemidualEval> {
        let mut ev = self.eval(a, f, true)?;
        for _ in 0..max_iter {
            if ev.grad_f.iter().map(|v| v.abs()).sum::<f64>() <= tol {
                break;
            }
            for (fi, r) in f.iter_mut().zip(&ev.rowsum) {
                *fi -= 0.5 * self.eps * r.ln();
            }
            ev = self.eval(a, f, true)?;
        }
        Ok(ev)
    }

    /// `G*` re-gauged to `Σ G = 0`, with the matching shift of `F`.
    pub fn potentials(&self, f: &[f64], lse: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g: Vec<f64> = lse.iter().map(|l| -0.5 * self.eps * l).collect();
        let u = g.iter().sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|v| *v -= u);
        (f.iter().map(|v| v + u).collect(), g)
    }

    /// Per-feature RMS, used to precondition the Hadamard factors.
    fn feature_scales(&self) -> Vec<f64> {
        match self.basis.samples() {
            Some((x, y)) => {
                let rms = |m: &DMatrix<f64>| -> Vec<f64> {
                    m.column_iter().map(|c| (c.norm_squared() / m.nrows() as f64).sqrt()).collect()
                };
                let (rx, ry) = (rms(x), rms(y));
                let mut out = Vec::with_capacity(rx.len() * ry.len());
                for q in &ry {
                    for p in &rx {
                        out.push((p * q).max(1e-300));
                    }
                }
                out
            }
            None => self
                .basis
                .features()
                .iter()
                .map(|c| (c.norm_squared() / c.len() as f64).sqrt().max(1e-300))
                .collect(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sup norm of the minimal-norm element of `∇ℒ(A) + λ∂‖A‖₁`.
pub fn optimality_residual(a: &[f64], grad: &[f64], lambda: f64) -> f64 {
    a.iter()
        .zip(grad)
        .map(|(&ak, &gk)| {
            if ak.abs() > SUPPORT_TOL {
                (gk + lambda * ak.signum()).abs()
            } else {
                (gk.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Value and gradients of the Hadamard semi-dual
/// `J(U⊙V, F) + (λ/2)(‖U‖² + ‖V‖²)`.
pub fn semidual_objective(
    f: &[f64],
    u: &[f64],
    v: &[f64],
    basis: &CostBasis,
    eps: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s = basis.s();
    if u.len() != s || v.len() != s || f.len() != basis.n_rows() {
        return input("semi-dual variable lengths do not match the basis");
    }
    let sd = Semidual::new(basis, eps)?;
    let a: Vec<f64> = u.iter().zip(v).map(|(x, y)| x * y).collect();
    let ev = sd.eval(&a, f, true)?;
    let pen = 0.5 * lambda * (dot(u, u) + dot(v, v));
    let gu = (0..s).map(|k| ev.grad_a[k] * v[k] + lambda * u[k]).collect();
    let gv = (0..s).map(|k| ev.grad_a[k] * u[k] + lambda * v[k]).collect();
    Ok((ev.value + pen, ev.grad_f, gu, gv))
}

/// Smallest `λ` for which `A = 0` is optimal: `‖Φ*P̂‖∞`.
pub fn null_threshold(basis: &CostBasis) -> Result<f64> {
    Ok(basis.empirical_moments()?.amax())
}

/// `λ‖A‖₁ + ℒ(A)`, with the inner minimization over `F` done by semi-dual Sinkhorn.
pub fn objective_value(basis: &CostBasis, a: &[f64], eps: f64, lambda: f64) -> Result<f64> {
    if a.len() != basis.s() {
        return input("parameter length does not match the basis");
    }
    let sd = Semidual::new(basis, eps)?;
    let mut f = vec![0.0; basis.n_rows()];
    let ev = sd.sinkhorn_f(a, &mut f, 1e-13, 100_000)?;
    Ok(ev.value - 0.5 * eps + lambda * a.iter().map(|v| v.abs()).sum::<f64>())
}

fn warn_if_not_unique(basis: &CostBasis) {
    let gram = match basis.samples() {
        Some((x, y)) => (y.transpose() * y).kronecker(&(x.transpose() * x)),
        None => {
            let f = basis.features();
            DMatrix::from_fn(f.len(), f.len(), |j, k| f[j].dot(&f[k]))
        }
    };
    let ev = nalgebra::SymmetricEigen::new(gram).eigenvalues;
    if ev.min() <= 1e-12 * ev.max().max(1e-300) {
        log::warn!("lambda = 0 with a rank-deficient feature map: the minimizer is not unique");
    }
}

pub fn solve(basis: &CostBasis, config: &SolverConfig) -> Result<IotSolution> {
    solve_from(basis, config, None)
}

/// Solve starting from a previous solution (same basis), typically the
/// previous point of a regularization path.
pub fn solve_from(basis: &CostBasis, config: &SolverConfig, warm: Option<&IotSolution>) -> Result<IotSolution> {
    config.validate()?;
    if !basis.is_centered() {
        return input("cost features must be centered before solving");
    }
    let sd = Semidual::new(basis, config.eps)?;
    let n = sd.n;
    let s = basis.s();
    let lambda = config.lambda;
    if lambda == 0.0 {
        warn_if_not_unique(basis);
    }
    let sigma = sd.feature_scales();
    let root_n = (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x0 = vec![0.0; n + 2 * s];
    let mut draw = || rng.gen_range(-config.init_scale..=config.init_scale);
    for k in 0..s {
        // A_k = U_k V_k / σ_k.
        let (mut u, mut v) = (draw(), draw());
        if let Some(w) = warm {
            let ak = w.a.values()[k];
            if ak.abs() > SUPPORT_TOL {
                let r = (ak.abs() * sigma[k]).sqrt();
                u = r * ak.signum();
                v = r;
            }
        }
        x0[n + k] = u;
        x0[n + s + k] = v;
    }
    let a_of = |x: &[f64]| -> Vec<f64> { (0..s).map(|k| x[n + k] * x[n + s + k] / sigma[k]).collect() };
    // Initial F from a few semi-dual Sinkhorn sweeps.
    let mut f0 = match warm {
        Some(w) if w.f.len() == n => w.f.clone(),
        _ => vec![0.0; n],
    };
    sd.sinkhorn_f(&a_of(&x0), &mut f0, 1e-3, 5)?;
    for i in 0..n {
        x0[i] = f0[i] / root_n;
    }

    // Last evaluations, so the stopping test can reuse ∂J/∂A.
    let cache: RefCell<Vec<(Vec<f64>, Vec<f64>, f64)>> = RefCell::new(Vec::new());
    let objective = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        let a = a_of(x);
        let f: Vec<f64> = x[..n].iter().map(|v| v * root_n).collect();
        let ev = sd.eval(&a, &f, true)?;
        let mut val = ev.value;
        for i in 0..n {
            g[i] = ev.grad_f[i] * root_n;
        }
        for k in 0..s {
            let (u, v) = (x[n + k], x[n + s + k]);
            val += 0.5 * lambda / sigma[k] * (u * u + v * v);
            g[n + k] = (ev.grad_a[k] * v + lambda * u) / sigma[k];
            g[n + s + k] = (ev.grad_a[k] * u + lambda * v) / sigma[k];
        }
        let marg: f64 = ev.grad_f.iter().map(|v| v.abs()).sum();
        let mut c = cache.borrow_mut();
        if c.len() == 4 {
            c.remove(0);
        }
        c.push((x.to_vec(), ev.grad_a, marg));
        Ok(val)
    };
    // Off-support entries of U⊙V only decay geometrically. The first pass
    // stops once the residual holds with entries below PRUNE_REL·‖A‖∞ read
    // as zero; the pruned point is then polished and verified, and the
    // strict test below is the fallback.
    let residual_at = |x: &[f64], strict: bool| -> Option<f64> {
        let c = cache.borrow();
        let (_, ga, marg) = c.iter().rev().find(|(cx, _, _)| cx.as_slice() == x)?;
        let a = a_of(x);
        let a = if strict || lambda == 0.0 { a } else { prune(a) };
        Some(optimality_residual(&a, ga, lambda).max(*marg))
    };
    let opts = LbfgsOptions {
        memory: config.lbfgs_memory,
        max_iter: config.max_iter,
        ..LbfgsOptions::default()
    };
    let out = lbfgs::minimize(&objective, x0, &opts, |x, _| residual_at(x, false).is_some_and(|r| r <= config.grad_tol))?;
    let (mut iterations, mut evaluations) = (out.iterations, out.evaluations);
    let mut fin = finish(&sd, prune(a_of(&out.x)), &out.x, &sigma, config)?;
    iterations += fin.iterations;
    evaluations += fin.evaluations;
    if lambda > 0.0 && out.stop == Stop::Converged && !fin.accepted(config) {
        let opts = LbfgsOptions {
            max_iter: config.max_iter.saturating_sub(iterations),
            ..opts
        };
        let out = lbfgs::minimize(&objective, out.x, &opts, |x, _| residual_at(x, true).is_some_and(|r| r <= config.grad_tol))?;
        let mut a = a_of(&out.x);
        for v in a.iter_mut() {
            if v.abs() <= SUPPORT_TOL {
                *v = 0.0;
            }
        }
        let strict = finish(&sd, a, &out.x, &sigma, config)?;
        iterations += out.iterations + strict.iterations;
        evaluations += out.evaluations + strict.evaluations;
        fin = strict;
    }
    let Finished { a, f, ev, .. } = fin;
    let (f, g) = sd.potentials(&f, &ev.lse);
    let residual = optimality_residual(&a, &ev.grad_a, lambda);
    let marginal_residual: f64 = ev.grad_f.iter().map(|v| v.abs()).sum();
    let z_lambda: Vec<f64> = if lambda > 0.0 {
        ev.grad_a.iter().map(|g| -g / lambda).collect()
    } else {
        vec![0.0; s]
    };
    let kkt_sup = z_lambda.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Off the support |z_k| ≤ 1 + residual/λ: convergence also asks for a
    // certificate within KKT_SLACK of the unit ball.
    let kkt_ok = lambda == 0.0 || residual <= KKT_SLACK * lambda;
    let converged = residual.max(marginal_residual) <= config.grad_tol && kkt_ok;
    if !converged {
        log::debug!(
            "semi-dual solve stopped after {iterations} iterations (lambda = {lambda}, residual {residual:.2e}, marginal {marginal_residual:.2e})"
        );
    }
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    Ok(IotSolution {
        a: CostVector::new(a),
        f,
        g,
        z_lambda,
        objective: ev.value - 0.5 * config.eps + lambda * l1,
        kkt_sup,
        optimality_residual: residual,
        marginal_residual,
        converged,
        iterations,
        evaluations,
    })
}

struct Polished {
    a: Vec<f64>,
    f: Vec<f64>,
    ev: SemidualEval,
    iterations: usize,
    evaluations: usize,
}

/// Entries below this fraction of `‖A‖∞` are dropped by the first solver pass.
const PRUNE_REL: f64 = 1e-6;

fn prune(mut a: Vec<f64>) -> Vec<f64> {
    let cut = PRUNE_REL * a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in a.iter_mut() {
        if v.abs() <= cut.max(SUPPORT_TOL) {
            *v = 0.0;
        }
    }
    a
}

struct Finished {
    a: Vec<f64>,
    f: Vec<f64>,
    ev: SemidualEval,
    lambda: f64,
    iterations: usize,
    evaluations: usize,
}

impl Finished {
    fn accepted(&self, config: &SolverConfig) -> bool {
        let residual = optimality_residual(&self.a, &self.ev.grad_a, self.lambda);
        let marginal: f64 = self.ev.grad_f.iter().map(|v| v.abs()).sum();
        residual.max(marginal) <= config.grad_tol && residual <= KKT_SLACK * self.lambda
    }
}

/// Evaluate at `a` with the potentials of `x`, polishing when the KKT slack is missed.
fn finish(sd: &Semidual, a: Vec<f64>, x: &[f64], sigma: &[f64], config: &SolverConfig) -> Result<Finished> {
    let lambda = config.lambda;
    let root_n = (sd.n as f64).sqrt();
    let f: Vec<f64> = x[..sd.n].iter().map(|v| v * root_n).collect();
    let ev = sd.eval(&a, &f, true)?;
    let mut fin = Finished {
        a,
        f,
        ev,
        lambda,
        iterations: 0,
        evaluations: 0,
    };
    if lambda > 0.0 && optimality_residual(&fin.a, &fin.ev.grad_a, lambda) > KKT_SLACK * lambda {
        if let Some(p) = polish(sd, &fin.a, &fin.f, sigma, config)? {
            fin.iterations = p.iterations;
            fin.evaluations = p.evaluations;
            if optimality_residual(&p.a, &p.ev.grad_a, lambda) < optimality_residual(&fin.a, &fin.ev.grad_a, lambda) {
                (fin.a, fin.f, fin.ev) = (p.a, p.f, p.ev);
            }
        }
    }
    Ok(fin)
}

/// Refine with the support and signs of `a0` held fixed. There the penalty is
/// linear and the problem smooth in `(F, A_I)`, which avoids the slowly
/// converging directions of the factored form. `None` if a sign flips.
fn polish(sd: &Semidual, a0: &[f64], f0: &[f64], sigma: &[f64], config: &SolverConfig) -> Result<Option<Polished>> {
    let lambda = config.lambda;
    let n = sd.n;
    let s = a0.len();
    let support: Vec<usize> = (0..s).filter(|&k| a0[k] != 0.0).collect();
    if support.is_empty() {
        return Ok(None);
    }
    let signs: Vec<f64> = support.iter().map(|&k| a0[k].signum()).collect();
    let root_n = (n as f64).sqrt();
    let mut x0: Vec<f64> = f0.iter().map(|v| v / root_n).collect();
    x0.extend(support.iter().map(|&k| a0[k] * sigma[k]));
    let a_of = |x: &[f64]| -> Vec<f64> {
        let mut a = vec![0.0; s];
        for (j, &k) in support.iter().enumerate() {
            a[k] = x[n + j] / sigma[k];
        }
        a
    };
    let last: RefCell<Option<(Vec<f64>, Vec<f64>, f64)>> = RefCell::new(None);
    let objective = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        let a = a_of(x);
        let f: Vec<f64> = x[..n].iter().map(|v| v * root_n).collect();
        let ev = sd.eval(&a, &f, true)?;
        let mut val = ev.value;
        for i in 0..n {
            g[i] = ev.grad_f[i] * root_n;
        }
        for (j, &k) in support.iter().enumerate() {
            val += lambda * signs[j] * a[k];
            g[n + j] = (ev.grad_a[k] + lambda * signs[j]) / sigma[k];
        }
        let marg: f64 = ev.grad_f.iter().map(|v| v.abs()).sum();
        *last.borrow_mut() = Some((x.to_vec(), ev.grad_a, marg));
        Ok(val)
    };
    let done = |x: &[f64], _g: &[f64]| -> bool {
        let c = last.borrow();
        let Some((cx, ga, marg)) = c.as_ref() else {
            return false;
        };
        if cx.as_slice() != x {
            return false;
        }
        let a = a_of(x);
        let flipped = support.iter().zip(&signs).any(|(&k, &sg)| a[k] * sg <= SUPPORT_TOL);
        // Entries off the support are out of reach here; the caller checks them.
        let on_support = support.iter().zip(&signs).map(|(&k, &sg)| (ga[k] + lambda * sg).abs()).fold(0.0, f64::max);
        flipped || (on_support <= KKT_SLACK * lambda && *marg <= config.grad_tol)
    };
    let opts = LbfgsOptions {
        memory: config.lbfgs_memory,
        max_iter: config.max_iter,
        ..LbfgsOptions::default()
    };
    let out = lbfgs::minimize(objective, x0, &opts, done)?;
    let a = a_of(&out.x);
    if support.iter().zip(&signs).any(|(&k, &sg)| a[k] * sg <= SUPPORT_TOL) {
        return Ok(None);
    }
    let f: Vec<f64> = out.x[..n].iter().map(|v| v * root_n).collect();
    let ev = sd.eval(&a, &f, true)?;
    Ok(Some(Polished {
        a,
        f,
        ev,
        iterations: out.iterations,
        evaluations: out.evaluations,
    }))
}

/// Solve along a strictly descending list of penalties with warm starts.
/// Failures are reported per entry.
pub fn reg_path(basis: &CostBasis, lambdas: &[f64], config: &SolverConfig) -> Result<Vec<Result<IotSolution>>> {
    if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return input("lambdas must be strictly descending");
    }
    let mut out: Vec<Result<IotSolution>> = Vec::with_capacity(lambdas.len());
    let mut prev: Option<IotSolution> = None;
    for &lambda in lambdas {
        let cfg = SolverConfig { lambda, ..*config };
        let res = solve_from(basis, &cfg, prev.as_ref());
        if let Ok(sol) = &res {
            prev = Some(sol.clone());
        }
        out.push(res);
    }
    Ok(out)
}

impl From<&IotSolution> for IotError {
    fn from(sol: &IotSolution) -> Self {
        IotError::Convergence {
            iterations: sol.iterations,
            residual: sol.optimality_residual.max(sol.marginal_residual),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eot::{self, center_features, SinkhornOptions};
    use approx::assert_relative_eq;

    fn random_basis(seed: u64, n: usize, s: usize) -> CostBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<_> = (0..s).map(|_| DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))).collect();
        center_features(&CostBasis::dense(raw).unwrap()).unwrap()
    }

    fn sample_basis(seed: u64, n: usize, d1: usize, d2: usize) -> CostBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d1, |_, _| rng.gen_range(-1.0..1.0));
        let mut y = DMatrix::from_fn(n, d2, |_, _| rng.gen_range(-1.0..1.0));
        // Correlate y with x so the data carry signal.
        for i in 0..n {
            y[(i, 0)] += 0.8 * x[(i, 0)];
        }
        center_features(&CostBasis::bilinear(x, y).unwrap()).unwrap()
    }

    #[test]
    fn zero_point_is_data_constant() {
        let b = random_basis(1, 5, 3);
        let (val, gf, _, _) = semidual_objective(&[0.0; 5], &[0.0; 3], &[0.0; 3], &b, 0.7, 0.2).unwrap();
        assert_relative_eq!(val, 0.35, epsilon = 1e-14);
        assert!(gf.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for b in [random_basis(2, 4, 3), sample_basis(3, 4, 2, 2)] {
            let s = b.s();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let f: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let u: Vec<f64> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (eps, lam) = (0.9, 0.3);
            let (_, gf, gu, gv) = semidual_objective(&f, &u, &v, &b, eps, lam).unwrap();
            let h = 1e-6;
            let val = |f: &[f64], u: &[f64], v: &[f64]| semidual_objective(f, u, v, &b, eps, lam).unwrap().0;
            let check = |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2), "{fd} vs {an}");
            for i in 0..4 {
                let (mut p, mut m) = (f.clone(), f.clone());
                p[i] += h;
                m[i] -= h;
                check((val(&p, &u, &v) - val(&m, &u, &v)) / (2.0 * h), gf[i]);
            }
            for k in 0..s {
                let (mut p, mut m) = (u.clone(), u.clone());
                p[k] += h;
                m[k] -= h;
                check((val(&f, &p, &v) - val(&f, &m, &v)) / (2.0 * h), gu[k]);
                let (mut p, mut m) = (v.clone(), v.clone());
                p[k] += h;
                m[k] -= h;
                check((val(&f, &u, &p) - val(&f, &u, &m)) / (2.0 * h), gv[k]);
            }
        }
    }

    #[test]
    fn semidual_equals_full_dual_at_matched_potentials() {
        let b = random_basis(5, 5, 2);
        let a = [0.6, -0.4];
        let eps = 1.3;
        let f = [0.1, -0.2, 0.05, 0.3, 0.0];
        let sd = Semidual::new(&b, eps).unwrap();
        let ev = sd.eval(&a, &f, false).unwrap();
        let g: Vec<f64> = ev.lse.iter().map(|l| -0.5 * eps * l).collect();
        let c = b.cost(&a);
        let n = 5.0;
        let mut full = 0.0;
        for i in 0..5 {
            full -= (f[i] + g[i] + c[(i, i)]) / n;
            for j in 0..5 {
                full += 0.5 * eps / (n * n) * (2.0 * (f[i] + g[j] + c[(i, j)]) / eps).exp();
            }
        }
        assert_relative_eq!(ev.value, full, epsilon = 1e-13);
    }

    #[test]
    fn bilinear_and_dense_semidual_agree() {
        let b = sample_basis(6, 13, 3, 2);
        let dense = CostBasis::dense(b.features()).unwrap();
        let a = [0.3, -0.2, 0.1, 0.5, -0.7, 0.2];
        let f: Vec<f64> = (0..13).map(|i| 0.01 * i as f64).collect();
        let e1 = Semidual::new(&b, 0.4).unwrap().eval(&a, &f, true).unwrap();
        let e2 = Semidual::new(&dense, 0.4).unwrap().eval(&a, &f, true).unwrap();
        assert_relative_eq!(e1.value, e2.value, epsilon = 1e-12);
        for (x, y) in e1.grad_a.iter().zip(&e2.grad_a).chain(e1.grad_f.iter().zip(&e2.grad_f)) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_value_matches_sinkhorn_loss() {
        let b = random_basis(7, 6, 3);
        let a = [0.5, 0.0, -1.0];
        let opts = SinkhornOptions {
            tol: 1e-14,
            max_iter: 100_000,
        };
        let want = eot::loss_with(&a, &b, 0.8, &opts).unwrap() + 0.1 * 1.5;
        assert_relative_eq!(objective_value(&b, &a, 0.8, 0.1).unwrap(), want, epsilon = 1e-11);
    }

    #[test]
    fn above_null_threshold_gives_zero() {
        let b = sample_basis(8, 30, 2, 2);
        let lmax = null_threshold(&b).unwrap();
        let sol = solve(&b, &SolverConfig::new(1.01 * lmax, 1.0)).unwrap();
        assert!(sol.converged);
        assert!(sol.a.values().iter().all(|&v| v == 0.0));
        let below = solve(&b, &SolverConfig::new(0.5 * lmax, 1.0)).unwrap();
        assert!(!below.a.support().is_empty());
    }

    /// Projected subgradient on the ℓ1 problem with exact Sinkhorn gradients.
    fn subgradient_oracle(b: &CostBasis, eps: f64, lambda: f64) -> f64 {
        let opts = SinkhornOptions {
            tol: 1e-13,
            max_iter: 100_000,
        };
        let s = b.s();
        let mut a = vec![0.0; s];
        let mut best = f64::INFINITY;
        // Proximal gradient: the smooth part has Lipschitz gradient ≤ (2/ε) max‖C‖².
        let lip = 2.0 / eps * b.features().iter().map(|c| c.norm_squared() / c.nrows() as f64).sum::<f64>();
        let step = 1.0 / lip;
        for _ in 0..20_000 {
            let g = eot::grad_loss_with(&a, b, eps, &opts).unwrap();
            for k in 0..s {
                a[k] = crate::linalg::soft(a[k] - step * g[k], step * lambda);
            }
        }
        for _ in 0..1 {
            let v = eot::loss_with(&a, b, eps, &opts).unwrap() + lambda * a.iter().map(|x| x.abs()).sum::<f64>();
            best = best.min(v);
        }
        best
    }

    #[test]
    fn tiny_instance_matches_oracle() {
        let b = random_basis(0, 4, 2);
        let eps = 1.0;
        let lambda = 0.3 * null_threshold(&b).unwrap();
        let sol = solve(&b, &SolverConfig::new(lambda, eps)).unwrap();
        assert!(sol.converged);
        let want = subgradient_oracle(&b, eps, lambda);
        assert!((sol.objective - want).abs() <= 1e-5, "{} vs {want}", sol.objective);
    }

    #[test]
    fn kkt_holds_on_convergence() {
        let b = sample_basis(9, 40, 3, 3);
        let lmax = null_threshold(&b).unwrap();
        for frac in [0.05, 0.2, 0.6] {
            let sol = solve(&b, &SolverConfig::new(frac * lmax, 0.5)).unwrap();
            assert!(sol.converged, "frac {frac}: residual {} marginal {}", sol.optimality_residual, sol.marginal_residual);
            assert!(sol.kkt_sup <= 1.0 + 1e-6);
            for &k in sol.a.support() {
                assert_relative_eq!(sol.z_lambda[k], sol.a.values()[k].signum(), epsilon = 1e-6);
            }
            let sum_g: f64 = sol.g.iter().sum();
            assert!(sum_g.abs() < 1e-10);
        }
    }

    #[test]
    fn path_warm_equals_cold() {
        let b = sample_basis(10, 30, 2, 3);
        let lmax = null_threshold(&b).unwrap();
        let lambdas = [1.2 * lmax, 0.5 * lmax, 0.2 * lmax, 0.05 * lmax];
        let cfg = SolverConfig {
            grad_tol: 1e-10,
            ..SolverConfig::new(0.0, 0.7)
        };
        let path = reg_path(&b, &lambdas, &cfg).unwrap();
        assert_eq!(path.len(), 4);
        assert!(path[0].as_ref().unwrap().a.values().iter().all(|&v| v == 0.0));
        for (sol, &lam) in path.iter().zip(&lambdas) {
            let warm = sol.as_ref().unwrap();
            let cold = solve(&b, &SolverConfig { lambda: lam, ..cfg }).unwrap();
            for (x, y) in warm.a.values().iter().zip(cold.a.values()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        assert!(reg_path(&b, &[0.1, 0.2], &cfg).is_err());
    }

    #[test]
    fn sample_order_does_not_matter() {
        let b = sample_basis(11, 25, 2, 2);
        let perm: Vec<usize> = (0..25).rev().collect();
        let pb = b.permuted(&perm).unwrap();
        let lam = 0.3 * null_threshold(&b).unwrap();
        let cfg = SolverConfig {
            grad_tol: 1e-11,
            ..SolverConfig::new(lam, 0.6)
        };
        let s1 = solve(&b, &cfg).unwrap();
        let s2 = solve(&pb, &cfg).unwrap();
        for (x, y) in s1.a.values().iter().zip(s2.a.values()) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }
}
