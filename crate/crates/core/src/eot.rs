//! Discrete entropic optimal transport.
//!
//! Convention used across the crate: the forward problem maximizes
//! `⟨C, P⟩ − (ε/2) KL(P | a⊗b)` over couplings of `a` and `b`, so the optimal
//! coupling is `P_ij = a_i b_j exp(2(F_i + G_j + C_ij)/ε)`. Potentials are pinned
//! by `Σ_j G_j = 0`. KL carries the `− Σp + Σq` terms, which makes `W = 0` at a
//! zero cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, numerical, IotError, Result};
use crate::kernel::{exp_neg, BilinearData};

/// Absolute threshold below which a cost coefficient is treated as zero.
pub const SUPPORT_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Repr {
    Dense {
        n_rows: usize,
        n_cols: usize,
        features: Vec<DMatrix<f64>>,
    },
    /// `C_(p,q)[i,j] = x_ip y_jq`, feature index `p + d1 q`.
    Bilinear { x: DMatrix<f64>, y: DMatrix<f64> },
}

/// The linear cost parameterization `Φ A = Σ_k A_k C_k`.
#[derive(Debug, Clone)]
pub struct CostBasis {
    repr: Repr,
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

impl CostBasis {
    pub fn dense(features: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = features.first() else {
            return input("cost basis needs at least one feature");
        };
        let (n_rows, n_cols) = first.shape();
        if n_rows == 0 || n_cols == 0 {
            return input("cost features must be non-empty");
        }
        for (k, c) in features.iter().enumerate() {
            if c.shape() != (n_rows, n_cols) {
                return input(format!("feature {k} has shape {:?}, expected {:?}", c.shape(), (n_rows, n_cols)));
            }
            if !all_finite(c) {
                return input(format!("feature {k} has non-finite entries"));
            }
        }
        Ok(Self {
            repr: Repr::Dense {
                n_rows,
                n_cols,
                features,
            },
        })
    }

    /// Quadratic features `x_iᵀ A y_j` from paired samples (rows of `x` and `y`).
    pub fn bilinear(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return input("sample matrices must be non-empty");
        }
        if x.nrows() != y.nrows() {
            return input(format!("{} x-samples but {} y-samples", x.nrows(), y.nrows()));
        }
        if !all_finite(&x) || !all_finite(&y) {
            return input("samples contain non-finite values");
        }
        Ok(Self {
            repr: Repr::Bilinear { x, y },
        })
    }

    pub fn n_rows(&self) -> usize {
        match &self.repr {
            Repr::Dense { n_rows, .. } => *n_rows,
            Repr::Bilinear { x, .. } => x.nrows(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match &self.repr {
            Repr::Dense { n_cols, .. } => *n_cols,
            Repr::Bilinear { y, .. } => y.nrows(),
        }
    }

    pub fn s(&self) -> usize {
        match &self.repr {
            Repr::Dense { features, .. } => features.len(),
            Repr::Bilinear { x, y } => x.ncols() * y.ncols(),
        }
    }

    /// `(d1, d2)` for bilinear bases.
    pub fn bilinear_dims(&self) -> Option<(usize, usize)> {
        match &self.repr {
            Repr::Dense { .. } => None,
            Repr::Bilinear { x, y } => Some((x.ncols(), y.ncols())),
        }
    }

    pub fn samples(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.repr {
            Repr::Dense { .. } => None,
            Repr::Bilinear { x, y } => Some((x, y)),
        }
    }

    pub fn feature(&self, k: usize) -> DMatrix<f64> {
        match &self.repr {
            Repr::Dense { features, .. } => features[k].clone(),
            Repr::Bilinear { x, y } => {
                let d1 = x.ncols();
                let (p, q) = (k % d1, k / d1);
                x.column(p) * y.column(q).transpose()
            }
        }
    }

    pub fn features(&self) -> Vec<DMatrix<f64>> {
        (0..self.s()).map(|k| self.feature(k)).collect()
    }

    /// `Φ A`
    pub fn cost(&self, a: &[f64]) -> DMatrix<f64> {
        assert_eq!(a.len(), self.s(), "parameter length mismatch");
        match &self.repr {
            Repr::Dense {
                n_rows,
                n_cols,
                features,
            } => {
                let mut c = DMatrix::zeros(*n_rows, *n_cols);
                for (ak, ck) in a.iter().zip(features) {
                    if *ak != 0.0 {
                        c += ck * *ak;
                    }
                }
                c
            }
            Repr::Bilinear { x, y } => {
                let am = DMatrix::from_column_slice(x.ncols(), y.ncols(), a);
                x * am * y.transpose()
            }
        }
    }

    /// `Φ* P = (⟨C_k, P⟩)_k`
    pub fn adjoint(&self, p: &DMatrix<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Dense { features, .. } => DVector::from_iterator(features.len(), features.iter().map(|c| c.dot(p))),
            Repr::Bilinear { x, y } => {
                let m = x.transpose() * p * y;
                DVector::from_column_slice(m.as_slice())
            }
        }
    }

    /// `Φ* P̂` for the empirical coupling `P̂ = Id/n` of paired samples.
    pub fn empirical_moments(&self) -> Result<DVector<f64>> {
        let n = self.n_rows();
        if n != self.n_cols() {
            return input("empirical coupling needs a square basis");
        }
        Ok(match &self.repr {
            Repr::Dense { features, .. } => {
                DVector::from_iterator(features.len(), features.iter().map(|c| c.diagonal().sum() / n as f64))
            }
            Repr::Bilinear { x, y } => {
                let m = x.transpose() * y / n as f64;
                DVector::from_column_slice(m.as_slice())
            }
        })
    }

    pub fn max_abs_entry(&self) -> f64 {
        match &self.repr {
            Repr::Dense { features, .. } => features.iter().map(|c| c.amax()).fold(0.0, f64::max),
            Repr::Bilinear { x, y } => x.amax() * y.amax(),
        }
    }

    /// Largest absolute row or column sum over all features, divided by the sum length.
    pub fn centering_defect(&self) -> f64 {
        match &self.repr {
            Repr::Dense { features, .. } => features
                .iter()
                .map(|c| {
                    let r = c.column_sum().amax() / c.ncols() as f64;
                    let s = c.row_sum().amax() / c.nrows() as f64;
                    r.max(s)
                })
                .fold(0.0, f64::max),
            Repr::Bilinear { x, y } => {
                let mx = x.row_mean().amax();
                let my = y.row_mean().amax();
                mx * y.amax() + my * x.amax()
            }
        }
    }

    pub fn is_centered(&self) -> bool {
        self.centering_defect() <= 1e-12 * (1.0 + self.max_abs_entry())
    }

    /// Rescale so that every cost entry is bounded by one, returning the factor `κ`
    /// with `Φ_original A = Φ_rescaled (κ A)`.
    ///
    /// For bilinear features the samples are divided by `r = max_i ‖x_i‖ ∨ ‖y_i‖`,
    /// so `κ = r²`.
    pub fn rescaled(&self) -> (CostBasis, f64) {
        match &self.repr {
            Repr::Dense { features, .. } => {
                let m = self.max_abs_entry();
                if m == 0.0 {
                    return (self.clone(), 1.0);
                }
                let feats = features.iter().map(|c| c / m).collect();
                (CostBasis::dense(feats).expect("scaled basis is valid"), m)
            }
            Repr::Bilinear { x, y } => {
                let rx = x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
                let ry = y.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
                let r = rx.max(ry);
                if r == 0.0 {
                    return (self.clone(), 1.0);
                }
                let b = CostBasis::bilinear(x / r, y / r).expect("scaled basis is valid");
                (b, r * r)
            }
        }
    }

    pub(crate) fn kernel_data(&self) -> Option<BilinearData> {
        match &self.repr {
            Repr::Dense { .. } => None,
            Repr::Bilinear { x, y } => {
                let n = x.nrows();
                let (d1, d2) = (x.ncols(), y.ncols());
                Some(BilinearData {
                    n,
                    d1,
                    d2,
                    xa: (0..d1).map(|p| x.column(p).iter().cloned().collect()).collect(),
                    yr: (0..n).flat_map(|j| y.row(j).iter().cloned().collect::<Vec<_>>()).collect(),
                })
            }
        }
    }

    /// Reorder paired samples; `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Result<CostBasis> {
        let n = self.n_rows();
        if perm.len() != n || n != self.n_cols() {
            return input("permutation length must equal the sample count");
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return input("not a permutation");
            }
            seen[p] = true;
        }
        match &self.repr {
            Repr::Dense { features, .. } => CostBasis::dense(
                features
                    .iter()
                    .map(|c| DMatrix::from_fn(n, n, |i, j| c[(perm[i], perm[j])]))
                    .collect(),
            ),
            Repr::Bilinear { x, y } => CostBasis::bilinear(x.select_rows(perm), y.select_rows(perm)),
        }
    }
}

fn double_center(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, k) = c.shape();
    let row_mean: Vec<f64> = (0..r).map(|i| c.row(i).sum() / k as f64).collect();
    let col_mean: Vec<f64> = (0..k).map(|j| c.column(j).sum() / r as f64).collect();
    let grand = c.sum() / (r * k) as f64;
    DMatrix::from_fn(r, k, |i, j| c[(i, j)] - row_mean[i] - col_mean[j] + grand)
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Double-center every feature so that all row and column sums vanish.
pub fn center_features(raw: &CostBasis) -> Result<CostBasis> {
    match &raw.repr {
        Repr::Dense { features, .. } => CostBasis::dense(features.iter().map(double_center).collect()),
        // (x_p − x̄_p)(y_q − ȳ_q) is exactly the double centering of x_p y_q.
        Repr::Bilinear { x, y } => CostBasis::bilinear(center_columns(x), center_columns(y)),
    }
}

/// A cost parameter together with its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    values: Vec<f64>,
    support: Vec<usize>,
}

impl CostVector {
    pub fn new(values: Vec<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > SUPPORT_TOL)
            .map(|(i, _)| i)
            .collect();
        Self { values, support }
    }

    pub fn zeros(s: usize) -> Self {
        Self::new(vec![0.0; s])
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self::new(m.as_slice().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn signs(&self) -> Vec<f64> {
        self.values.iter().map(|&v| crate::linalg::sign(v)).collect()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(rows, cols, &self.values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct EotSolution {
    pub coupling: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SinkhornOptions {
    /// L1 marginal residual at which iterations stop.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

fn check_prob(v: &DVector<f64>, name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return input(format!("marginal {name} must be strictly positive"));
    }
    if (v.sum() - 1.0).abs() > 1e-9 {
        return input(format!("marginal {name} sums to {}, expected 1", v.sum()));
    }
    Ok(())
}

/// Stabilized `log Σ_j exp(s_j)`. Clobbers `s`.
fn lse_in_place(s: &mut [f64]) -> f64 {
    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    let mut sum = 0.0;
    for v in s.iter_mut() {
        sum += exp_neg::<false>(*v - top);
    }
    top + sum.ln()
}

pub fn sinkhorn(
    cost: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<EotSolution> {
    sinkhorn_warm(cost, a, b, eps, opts, None)
}

/// Log-domain Sinkhorn started from the column potential `g0`.
pub fn sinkhorn_warm(
    cost: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    eps: f64,
    opts: &SinkhornOptions,
    g0: Option<&DVector<f64>>,
) -> Result<EotSolution> {
    if !(eps > 0.0) || !eps.is_finite() {
        return input(format!("eps must be positive, got {eps}"));
    }
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return input(format!("cost is {n}x{m} but marginals have lengths {} and {}", a.len(), b.len()));
    }
    check_prob(a, "a")?;
    check_prob(b, "b")?;
    if cost.iter().any(|v| !v.is_finite()) {
        return input("cost has non-finite entries");
    }
    let ln_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let ln_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut g: Vec<f64> = match g0 {
        Some(g) if g.len() == m => g.iter().cloned().collect(),
        _ => vec![0.0; m],
    };
    let mut iterations = 0;
    // Cold starts at small eps anneal from the cost range down; each stage
    // warm-starts the next.
    let range = cost.max() - cost.min();
    if g0.is_none() && range > 4.0 * eps {
        let mut stage = range;
        while stage > 2.0 * eps {
            let mut st = Sweeper::new(cost, &ln_a, &ln_b, stage, &g);
            let (it, _) = st.run(1e-3, opts.max_iter.saturating_sub(iterations));
            iterations += it;
            g = st.g();
            stage *= 0.5;
        }
    }
    let mut st = Sweeper::new(cost, &ln_a, &ln_b, eps, &g);
    let (it, residual) = st.run(opts.tol, opts.max_iter.saturating_sub(iterations));
    iterations += it;
    if !residual.is_finite() {
        return numerical(format!("Sinkhorn diverged (eps = {eps}); increase eps"));
    }
    if residual > opts.tol {
        return Err(IotError::Convergence {
            iterations,
            residual,
        });
    }
    let (mut f, mut g) = st.finish();
    let shift = g.mean();
    g.add_scalar_mut(-shift);
    f.add_scalar_mut(shift);
    let tau = 2.0 / eps;
    let coupling = DMatrix::from_fn(n, m, |i, j| (ln_a[i] + ln_b[j] + tau * (f[i] + g[j] + cost[(i, j)])).exp());
    let row_res: f64 = (0..n).map(|i| (coupling.row(i).sum() - a[i]).abs()).sum();
    let col_res: f64 = (0..m).map(|j| (coupling.column(j).sum() - b[j]).abs()).sum();
    let value = -a.dot(&f) - b.dot(&g) + 0.5 * eps * (coupling.sum() - 1.0);
    Ok(EotSolution {
        coupling,
        f,
        g,
        value,
        iterations,
        marginal_residual: row_res + col_res,
    })
}

/// Alternating log-domain updates on potentials scaled by `τ = 2/ε`.
struct Sweeper<'a> {
    ln_a: &'a [f64],
    ln_b: &'a [f64],
    tau: f64,
    /// `τ C` row-major, row `i` contiguous.
    ct: DMatrix<f64>,
    /// `τ C` column-major.
    cs: DMatrix<f64>,
    tf: Vec<f64>,
    tg: Vec<f64>,
    buf: Vec<f64>,
}

impl<'a> Sweeper<'a> {
    fn new(cost: &DMatrix<f64>, ln_a: &'a [f64], ln_b: &'a [f64], eps: f64, g: &[f64]) -> Self {
        let tau = 2.0 / eps;
        let (n, m) = cost.shape();
        Self {
            ln_a,
            ln_b,
            tau,
            ct: cost.transpose() * tau,
            cs: cost * tau,
            tf: vec![0.0; n],
            tg: g.iter().map(|v| v * tau).collect(),
            buf: vec![0.0; n.max(m)],
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.tf.len(), self.tg.len())
    }

    /// Row update; returns the L1 row residual of the state before the update.
    fn update_f(&mut self) -> f64 {
        let (n, m) = self.dims();
        let mut res = 0.0;
        for i in 0..n {
            let row = &self.ct.as_slice()[i * m..(i + 1) * m];
            let s = &mut self.buf[..m];
            for j in 0..m {
                s[j] = self.tg[j] + row[j] + self.ln_b[j];
            }
            let new = -lse_in_place(s);
            res += self.ln_a[i].exp() * ((self.tf[i] - new).exp() - 1.0).abs();
            self.tf[i] = new;
        }
        res
    }

    fn update_g(&mut self) {
        let (n, m) = self.dims();
        for j in 0..m {
            let col = &self.cs.as_slice()[j * n..(j + 1) * n];
            let s = &mut self.buf[..n];
            for i in 0..n {
                s[i] = self.tf[i] + col[i] + self.ln_a[i];
            }
            self.tg[j] = -lse_in_place(s);
        }
    }

    /// Iterate until the row residual of a column-exact pair is at most `tol`.
    fn run(&mut self, tol: f64, max_iter: usize) -> (usize, f64) {
        let mut residual = self.update_f();
        let mut it = 0;
        while it < max_iter {
            self.update_g();
            it += 1;
            residual = self.update_f();
            if !(residual > tol) {
                break;
            }
        }
        (it, residual)
    }

    fn g(&self) -> Vec<f64> {
        self.tg.iter().map(|v| v / self.tau).collect()
    }

    /// Potentials with exact column marginals.
    fn finish(mut self) -> (DVector<f64>, DVector<f64>) {
        self.update_g();
        let (n, m) = self.dims();
        (
            DVector::from_iterator(n, self.tf.iter().map(|v| v / self.tau)),
            DVector::from_iterator(m, self.tg.iter().map(|v| v / self.tau)),
        )
    }
}

/// `KL(p|q) = Σ p log(p/q) − Σ p + Σ q`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            s += pi * (pi / qi).ln();
        }
        s += qi - pi;
    }
    s
}

fn require_square(basis: &CostBasis) -> Result<usize> {
    let n = basis.n_rows();
    if n != basis.n_cols() {
        return input(format!("paired-sample basis must be square, got {n}x{}", basis.n_cols()));
    }
    Ok(n)
}

fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// Sinkhorn at the cost `Φ A` with uniform marginals.
pub fn forward(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<EotSolution> {
    if a.len() != basis.s() {
        return input(format!("parameter has length {}, basis has {} features", a.len(), basis.s()));
    }
    let n = require_square(basis)?;
    sinkhorn(&basis.cost(a), &uniform(n), &uniform(n), eps, opts)
}

/// `ℒ(A) = −⟨Φ A, P̂⟩ + W(A)` for the empirical coupling `P̂ = Id/n`.
pub fn loss(a: &CostVector, basis: &CostBasis, eps: f64) -> Result<f64> {
    loss_with(a.values(), basis, eps, &SinkhornOptions::default())
}

pub fn loss_with(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<f64> {
    let sol = forward(a, basis, eps, opts)?;
    let data = basis.empirical_moments()?;
    Ok(sol.value - data.as_slice().iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
}

/// `∇W(A) = Φ* P_A`
pub fn grad_w(a: &CostVector, basis: &CostBasis, eps: f64) -> Result<DVector<f64>> {
    grad_w_with(a.values(), basis, eps, &SinkhornOptions::default())
}

pub fn grad_w_with(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<DVector<f64>> {
    let sol = forward(a, basis, eps, opts)?;
    Ok(basis.adjoint(&sol.coupling))
}

/// `∇ℒ(A) = Φ* P_A − Φ* P̂`
pub fn grad_loss_with(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<DVector<f64>> {
    Ok(grad_w_with(a, basis, eps, opts)? - basis.empirical_moments()?)
}

/// Hessian of `W`, symmetrized.
pub fn hessian_w(a: &CostVector, basis: &CostBasis, eps: f64) -> Result<DMatrix<f64>> {
    hessian_w_with(a.values(), basis, eps, &SinkhornOptions::default())
}

pub fn hessian_w_with(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<DMatrix<f64>> {
    let sol = forward(a, basis, eps, opts)?;
    let h = hessian_from_solution(&sol, basis, eps)?;
    Ok(crate::linalg::symmetrize(&h))
}

/// Hessian of `W` at a solved coupling, by implicit differentiation of the
/// marginal constraints. Not symmetrized.
pub fn hessian_from_solution(sol: &EotSolution, basis: &CostBasis, eps: f64) -> Result<DMatrix<f64>> {
    let p = &sol.coupling;
    let (n, m) = p.shape();
    if p.iter().any(|&v| !(v > 0.0)) {
        return numerical(format!(
            "coupling has underflowed entries at eps = {eps}; the implicit system is singular, use a larger eps"
        ));
    }
    let a = DVector::from_iterator(n, (0..n).map(|i| p.row(i).sum()));
    let b = DVector::from_iterator(m, (0..m).map(|j| p.column(j).sum()));
    // Eliminate dF: (diag b − Pᵀ diag(1/a) P + b bᵀ) dG = −c + Pᵀ(r/a).
    // The rank-one term pins b·dG = 0 without changing any ∂P.
    let mut pa = p.clone();
    for i in 0..n {
        pa.row_mut(i).scale_mut(1.0 / a[i]);
    }
    let mut schur = -(p.transpose() * &pa);
    for j in 0..m {
        schur[(j, j)] += b[j];
    }
    schur += &b * b.transpose();
    let chol = crate::linalg::symmetrize(&schur).cholesky().ok_or_else(|| {
        IotError::Numerical(format!("implicit Sinkhorn system is singular at eps = {eps}; use a larger eps"))
    })?;
    let s = basis.s();
    let feats = basis.features();
    let mut dps = Vec::with_capacity(s);
    for ck in &feats {
        let pc = p.component_mul(ck);
        let r = DVector::from_iterator(n, (0..n).map(|i| pc.row(i).sum()));
        let c = DVector::from_iterator(m, (0..m).map(|j| pc.column(j).sum()));
        let r_over_a = r.component_div(&a);
        let rhs = -&c + p.transpose() * &r_over_a;
        let dg = chol.solve(&rhs);
        let df = -(r_over_a + &pa * &dg);
        let dp = DMatrix::from_fn(n, m, |i, j| p[(i, j)] * (df[i] + dg[j] + ck[(i, j)])) * (2.0 / eps);
        dps.push(dp);
    }
    Ok(DMatrix::from_fn(s, s, |j, k| feats[j].dot(&dps[k])))
}

/// `ℒ(A) − (ε/2) KL(P̂ | P_A)`, which does not depend on `A`.
pub fn bilevel_gap(a: &CostVector, basis: &CostBasis, eps: f64) -> Result<f64> {
    bilevel_gap_with(a.values(), basis, eps, &SinkhornOptions::default())
}

pub fn bilevel_gap_with(a: &[f64], basis: &CostBasis, eps: f64, opts: &SinkhornOptions) -> Result<f64> {
    let sol = forward(a, basis, eps, opts)?;
    gap_from_potentials(a, basis, eps, &sol.f, &sol.g, sol.value)
}

pub(crate) fn gap_from_potentials(
    a: &[f64],
    basis: &CostBasis,
    eps: f64,
    f: &DVector<f64>,
    g: &DVector<f64>,
    value: f64,
) -> Result<f64> {
    let n = require_square(basis)?;
    let c = basis.cost(a);
    let ln_n = (n as f64).ln();
    let floor = 1e-300f64.ln();
    // KL(P̂|P) with both masses 1: (1/n) Σ_i log((1/n) / P_ii).
    let mut kl = 0.0;
    for i in 0..n {
        let ln_pii = -2.0 * ln_n + 2.0 * (f[i] + g[i] + c[(i, i)]) / eps;
        if ln_pii < floor {
            return numerical(format!("coupling entry ({i},{i}) is below 1e-300; increase eps"));
        }
        kl += (-ln_n - ln_pii) / n as f64;
    }
    let data = basis.empirical_moments()?;
    let l = value - data.as_slice().iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    Ok(l - 0.5 * eps * kl)
}
