//! Graph-structured costs and the experiments built on them.
//!
//! The true cost is a shifted graph Laplacian `Â = δI + diag(G1) − G`, the
//! marginals are standard Gaussians and the coupling is the closed-form
//! Gaussian one. Drivers cover certificate profiles along geodesic distance,
//! support recovery along a λ path, and the `n^{-1/2}` sample-complexity rate.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::vanilla_certificate;
use crate::eot::{center_features, CostBasis, CostVector, SUPPORT_TOL};
use crate::error::{input, IotError, Result};
use crate::gaussian::{cross_covariance, gaussian_hessian, joint_covariance, GaussianModel};
use crate::iot::{reg_path, SolverConfig};
use crate::linalg::{ls_slope, max_eigenvalue, symmetrize};
use crate::population::{solve_population, PopulationConfig};

/// Distance reported for vertex pairs in different components.
pub const UNREACHABLE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub n: usize,
    /// `adjacency[i][j]` is an edge `i → j`; symmetric unless `directed`.
    pub adjacency: Vec<Vec<bool>>,
    pub directed: bool,
}

impl Graph {
    fn empty(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![vec![false; n]; n],
            directed: false,
        }
    }

    fn connect(&mut self, i: usize, j: usize) {
        self.adjacency[i][j] = true;
        self.adjacency[j][i] = true;
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&e| e).count()
    }

    /// Undirected edges, or arcs for a directed graph.
    pub fn edge_count(&self) -> usize {
        let arcs: usize = (0..self.n).map(|i| self.degree(i)).sum();
        if self.directed {
            arcs
        } else {
            arcs / 2
        }
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if self.adjacency[i][j] { 1.0 } else { 0.0 })
    }

    /// Keep only the arcs `i → j` with `i > j`.
    pub fn lower_directed(&self) -> Graph {
        let mut g = self.clone();
        for i in 0..self.n {
            for j in i..self.n {
                g.adjacency[i][j] = false;
            }
        }
        g.directed = true;
        g
    }

    pub fn symmetrized(&self) -> Graph {
        let mut g = Graph::empty(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.adjacency[i][j] {
                    g.connect(i, j);
                }
            }
        }
        g
    }
}

pub fn gen_circular(n: usize) -> Result<Graph> {
    if n < 3 {
        return input(format!("a cycle needs at least 3 vertices, got {n}"));
    }
    let mut g = Graph::empty(n);
    for i in 0..n {
        g.connect(i, (i + 1) % n);
    }
    Ok(g)
}

/// `rows x cols` grid; vertex `(r, c)` has index `r·cols + c`.
pub fn gen_grid_planar(rows: usize, cols: usize) -> Result<Graph> {
    if rows * cols < 3 || rows == 0 || cols == 0 {
        return input(format!("a {rows}x{cols} grid is too small"));
    }
    let mut g = Graph::empty(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            if c + 1 < cols {
                g.connect(v, v + 1);
            }
            if r + 1 < rows {
                g.connect(v, v + cols);
            }
        }
    }
    Ok(g)
}

/// Grid with `n` vertices, as square as possible (`rows` is the largest divisor ≤ √n).
pub fn gen_planar(n: usize) -> Result<Graph> {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    gen_grid_planar(rows.max(1), n / rows.max(1))
}

pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 3 {
        return input(format!("graph needs at least 3 vertices, got {n}"));
    }
    if !(0.0..=1.0).contains(&p) {
        return input(format!("edge probability must be in [0, 1], got {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                g.connect(i, j);
            }
        }
    }
    Ok(g)
}

/// `Â = δI + diag(G1) − G` with `δ = shift_frac · λ_max` of the (symmetrized) Laplacian.
pub fn shifted_laplacian_cost(g: &Graph, shift_frac: f64, delta: Option<f64>) -> Result<DMatrix<f64>> {
    let adj = g.adjacency_matrix();
    let degrees = nalgebra::DVector::from_iterator(g.n, adj.row_iter().map(|r| r.sum()));
    let laplacian = DMatrix::from_diagonal(&degrees) - &adj;
    let delta = match delta {
        Some(d) if d > 0.0 && d.is_finite() => d,
        Some(d) => return input(format!("shift must be positive, got {d}")),
        None => {
            if !(shift_frac > 0.0) {
                return input(format!("shift fraction must be positive, got {shift_frac}"));
            }
            let top = max_eigenvalue(&symmetrize(&laplacian));
            if top <= 0.0 {
                return input("graph has no edges: pass an explicit shift");
            }
            shift_frac * top
        }
    };
    Ok(laplacian + DMatrix::identity(g.n, g.n) * delta)
}

/// All-pairs hop distances on the symmetrized graph.
pub fn geodesic_distances(g: &Graph) -> Vec<Vec<usize>> {
    let sym = g.symmetrized();
    let neighbours: Vec<Vec<usize>> = (0..g.n)
        .map(|i| (0..g.n).filter(|&j| sym.adjacency[i][j]).collect())
        .collect();
    (0..g.n)
        .map(|src| {
            let mut dist = vec![UNREACHABLE; g.n];
            dist[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(v) = queue.pop_front() {
                for &w in &neighbours[v] {
                    if dist[w] == UNREACHABLE {
                        dist[w] = dist[v] + 1;
                        queue.push_back(w);
                    }
                }
            }
            dist
        })
        .collect()
}

/// `n` iid draws from the model's Gaussian coupling, as `(x, y)` with one sample per row.
pub fn sample_coupling(model: &GaussianModel, n: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n == 0 {
        return input("need at least one sample");
    }
    let joint = joint_covariance(model)?;
    let eig = joint.matrix.clone().symmetric_eigen();
    let floor = 1e-14 * eig.eigenvalues.amax();
    let roots = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let dim = joint.d1 + joint.d2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let draws = (factor * z).transpose();
    let x = draws.columns(0, joint.d1).into_owned();
    let y = draws.columns(joint.d1, joint.d2).into_owned();
    Ok((x, y))
}

/// Centered bilinear features scaled so that every sample has norm at most one.
///
/// Returns the basis and `κ` such that the estimate in original units is `A'/κ`
/// and a penalty `λ` in original units becomes `λ/κ`.
pub fn prepare_basis(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<(CostBasis, f64)> {
    let centered = center_features(&CostBasis::bilinear(x, y)?)?;
    Ok(centered.rescaled())
}

/// `‖Σ(Â)‖∞`, the smallest λ with a zero population solution.
pub fn analytic_null_threshold(model: &GaussianModel) -> Result<f64> {
    Ok(cross_covariance(model)?.amax())
}

/// `start..stop` (inclusive) in `count` log-spaced points, sorted descending.
pub fn log_grid(start: f64, stop: f64, count: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && stop > 0.0) || count == 0 {
        return input("log grid needs positive endpoints and at least one point");
    }
    let mut v: Vec<f64> = if count == 1 {
        vec![start]
    } else {
        let (l0, l1) = (start.ln(), stop.ln());
        (0..count)
            .map(|k| (l0 + (l1 - l0) * k as f64 / (count - 1) as f64).exp())
            .collect()
    };
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub lambda: f64,
    pub eps: f64,
    /// 0 for a run on exact moments.
    pub n_samples: usize,
    pub seed: u64,
    pub support_errors: usize,
    pub l2_error: f64,
    pub margin: f64,
    pub converged: bool,
    /// `ok`, or the error that made this entry fail.
    pub status: String,
}

impl TrialResult {
    /// A failed entry counts every position as wrong.
    fn failed(lambda: f64, eps: f64, n_samples: usize, seed: u64, margin: f64, s: usize, err: &IotError) -> Self {
        Self {
            lambda,
            eps,
            n_samples,
            seed,
            support_errors: s,
            l2_error: f64::NAN,
            margin,
            converged: false,
            status: err.to_string(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Positions where the estimated and true supports disagree.
pub fn support_errors(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> usize {
    estimate
        .iter()
        .zip(truth.iter())
        .filter(|(e, t)| (e.abs() > SUPPORT_TOL) != (t.abs() > SUPPORT_TOL))
        .count()
}

/// Identity-covariance model for the shifted Laplacian of `g`.
pub fn graph_model(g: &Graph, eps: f64) -> Result<GaussianModel> {
    GaussianModel::standard(shifted_laplacian_cost(g, 0.1, None)?, eps)
}

/// Margin of the vanilla certificate at the model's own cost.
pub fn model_margin(model: &GaussianModel) -> Result<f64> {
    let h = gaussian_hessian(model)?;
    Ok(vanilla_certificate(&h, &model.cost_vector())?.margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for TrialOptions {
    fn default() -> Self {
        // Converged solves also meet the KKT slack, so the estimate sits far
        // below sampling error even at this tolerance.
        Self {
            grad_tol: 1e-5,
            max_iter: 5000,
        }
    }
}

/// Sample `n_samples` pairs, solve the sample problem along `lambdas`
/// (original units, any order) and score each estimate against `Â`.
pub fn run_sparsistency_trial(
    g: &Graph,
    eps: f64,
    lambdas: &[f64],
    n_samples: usize,
    seed: u64,
    opts: &TrialOptions,
) -> Result<Vec<TrialResult>> {
    let model = graph_model(g, eps)?;
    let margin = model_margin(&model)?;
    let (x, y) = sample_coupling(&model, n_samples, seed)?;
    let (basis, kappa) = prepare_basis(x, y)?;
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let scaled: Vec<f64> = order.iter().map(|&k| lambdas[k] / kappa).collect();
    let config = SolverConfig {
        eps: model.sinkhorn_eps(),
        grad_tol: opts.grad_tol,
        max_iter: opts.max_iter,
        seed,
        ..SolverConfig::default()
    };
    let path = reg_path(&basis, &scaled, &config)?;
    let mut out = vec![None; lambdas.len()];
    for (entry, &k) in path.into_iter().zip(&order) {
        let result = match entry {
            Ok(sol) => {
                let est = sol.a.to_matrix(g.n, g.n) / kappa;
                TrialResult {
                    lambda: lambdas[k],
                    eps,
                    n_samples,
                    seed,
                    support_errors: support_errors(&est, &model.a),
                    l2_error: (&est - &model.a).norm(),
                    margin,
                    converged: sol.converged,
                    status: "ok".into(),
                }
            }
            Err(e) => TrialResult::failed(lambdas[k], eps, n_samples, seed, margin, g.n * g.n, &e),
        };
        out[k] = Some(result);
    }
    Ok(out.into_iter().map(|r| r.expect("every lambda is scored")).collect())
}

/// The same scoring on exact moments (the `n → ∞` problem).
pub fn run_population_trial(g: &Graph, eps: f64, lambdas: &[f64]) -> Result<Vec<TrialResult>> {
    let model = graph_model(g, eps)?;
    let margin = model_margin(&model)?;
    let moments = cross_covariance(&model)?;
    Ok(lambdas
        .iter()
        .map(|&lambda| match solve_population(&model, &moments, &PopulationConfig::new(lambda)) {
            Ok(sol) => TrialResult {
                lambda,
                eps,
                n_samples: 0,
                seed: 0,
                support_errors: support_errors(&sol.a, &model.a),
                l2_error: (&sol.a - &model.a).norm(),
                margin,
                converged: sol.converged,
                status: "ok".into(),
            },
            Err(e) => TrialResult::failed(lambda, eps, 0, 0, margin, g.n * g.n, &e),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub i: usize,
    pub j: usize,
    pub d_geod: usize,
    pub eps: f64,
    pub z: f64,
    pub on_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateProfile {
    pub rows: Vec<ProfileRow>,
    /// `(ε, margin)` in the order of the requested ε list.
    pub margins: Vec<(f64, f64)>,
}

/// Vanilla certificate of the Gaussian Hessian at `Â` for each ε, joined with
/// geodesic distances. With `directed`, only arcs `i → j` with `i > j` are kept.
pub fn certificate_profile(g: &Graph, eps_list: &[f64], directed: bool) -> Result<CertificateProfile> {
    let graph = if directed { g.lower_directed() } else { g.clone() };
    let a_hat = shifted_laplacian_cost(&graph, 0.1, None)?;
    let dist = geodesic_distances(&graph);
    let pattern = CostVector::from_matrix(&a_hat);
    let n = g.n;
    let per_eps: Vec<Result<(Vec<ProfileRow>, f64)>> = eps_list
        .par_iter()
        .map(|&eps| {
            let model = GaussianModel::standard(a_hat.clone(), eps)?;
            let cert = gaussian_hessian(&model)
                .and_then(|h| vanilla_certificate(&h, &pattern))
                .map_err(|e| IotError::Numerical(format!("certificate at eps = {eps}: {e}")))?;
            let mut rows = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    // Column-major vec index of entry (i, j).
                    let k = i + n * j;
                    rows.push(ProfileRow {
                        i,
                        j,
                        d_geod: dist[i][j],
                        eps,
                        z: cert.z[k],
                        on_support: a_hat[(i, j)].abs() > SUPPORT_TOL,
                    });
                }
            }
            Ok((rows, cert.margin))
        })
        .collect();
    let mut rows = Vec::new();
    let mut margins = Vec::new();
    for (r, &eps) in per_eps.into_iter().zip(eps_list) {
        let (mut chunk, margin) = r?;
        rows.append(&mut chunk);
        margins.push((eps, margin));
    }
    Ok(CertificateProfile { rows, margins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub n_samples: usize,
    pub seed: u64,
    pub error: f64,
    /// Against `Â`, not `A_∞`.
    pub support_errors: usize,
    pub converged: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySweep {
    pub eps: f64,
    pub lambda: f64,
    pub margin: f64,
    /// Least-squares slope of log mean error against log n.
    pub slope: f64,
    /// Mean ± 1.96 standard errors of the per-seed slopes.
    pub slope_ci: (f64, f64),
    pub mean_errors: Vec<(usize, f64)>,
    pub rows: Vec<ComplexityRow>,
}

/// `‖A_n − A_∞‖₂` over `n_grid` and `seeds`, where `A_∞` solves the exact-moment
/// problem with the same λ (original units).
pub fn sample_complexity_sweep(
    g: &Graph,
    eps: f64,
    lambda: f64,
    n_grid: &[usize],
    seeds: &[u64],
    opts: &TrialOptions,
) -> Result<ComplexitySweep> {
    if n_grid.len() < 2 || seeds.is_empty() {
        return input("need at least two sample sizes and one seed");
    }
    let model = graph_model(g, eps)?;
    let margin = model_margin(&model)?;
    if !(margin > 0.0) {
        log::warn!("certificate margin {margin} is not positive: the rate may not hold");
    }
    let limit = solve_population(&model, &cross_covariance(&model)?, &PopulationConfig::new(lambda))?;
    let jobs: Vec<(usize, u64)> = n_grid.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let rows: Vec<ComplexityRow> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let attempt = || -> Result<(f64, usize, bool)> {
                let (x, y) = sample_coupling(&model, n, seed)?;
                let (basis, kappa) = prepare_basis(x, y)?;
                let config = SolverConfig {
                    lambda: lambda / kappa,
                    eps: model.sinkhorn_eps(),
                    grad_tol: opts.grad_tol,
                    max_iter: opts.max_iter,
                    seed,
                    ..SolverConfig::default()
                };
                let sol = crate::iot::solve(&basis, &config)?;
                let est = sol.a.to_matrix(g.n, g.n) / kappa;
                Ok(((&est - &limit.a).norm(), support_errors(&est, &model.a), sol.converged))
            };
            match attempt() {
                Ok((error, support_errors, converged)) => ComplexityRow {
                    n_samples: n,
                    seed,
                    error,
                    support_errors,
                    converged,
                    status: "ok".into(),
                },
                Err(e) => ComplexityRow {
                    n_samples: n,
                    seed,
                    error: f64::NAN,
                    support_errors: g.n * g.n,
                    converged: false,
                    status: e.to_string(),
                },
            }
        })
        .collect();
    let good = |r: &&ComplexityRow| r.status == "ok" && r.error > 0.0;
    let mean_errors: Vec<(usize, f64)> = n_grid
        .iter()
        .map(|&n| {
            let errs: Vec<f64> = rows.iter().filter(good).filter(|r| r.n_samples == n).map(|r| r.error).collect();
            (n, errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect();
    let logn: Vec<f64> = mean_errors.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let loge: Vec<f64> = mean_errors.iter().map(|(_, e)| e.ln()).collect();
    let slope = ls_slope(&logn, &loge);
    let per_seed: Vec<f64> = seeds
        .iter()
        .filter_map(|&s| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(good)
                .filter(|r| r.seed == s)
                .map(|r| ((r.n_samples as f64).ln(), r.error.ln()))
                .collect();
            (pts.len() >= 2).then(|| {
                let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                ls_slope(&xs, &ys)
            })
        })
        .collect();
    let slope_ci = mean_ci(&per_seed);
    Ok(ComplexitySweep {
        eps,
        lambda,
        margin,
        slope,
        slope_ci,
        mean_errors,
        rows,
    })
}

fn mean_ci(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    if v.len() < 2 {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let mean = v.iter().sum::<f64>() / k;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let half = 1.96 * (var / k).sqrt();
    (mean - half, mean + half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators() {
        let c = gen_circular(5).unwrap();
        assert!((0..5).all(|i| c.degree(i) == 2));
        assert_eq!(c.edge_count(), 5);
        assert_eq!(gen_erdos_renyi(10, 0.0, 3).unwrap().edge_count(), 0);
        assert_eq!(gen_erdos_renyi(10, 1.0, 3).unwrap().edge_count(), 45);
        assert_eq!(gen_grid_planar(3, 3).unwrap().edge_count(), 12);
        assert_eq!(gen_planar(12).unwrap().edge_count(), gen_grid_planar(3, 4).unwrap().edge_count());
        assert_eq!(gen_erdos_renyi(30, 0.1, 7).unwrap(), gen_erdos_renyi(30, 0.1, 7).unwrap());
        assert!(gen_circular(2).is_err());
        assert!(gen_erdos_renyi(5, 1.5, 0).is_err());
        for i in 0..5 {
            assert!(!c.has_edge(i, i));
        }
    }

    #[test]
    fn laplacian_cost_examples() {
        let a = shifted_laplacian_cost(&gen_circular(5).unwrap(), 0.1, None).unwrap();
        let top = 2.0 - 2.0 * (4.0 * std::f64::consts::PI / 5.0).cos();
        assert!((a[(0, 0)] - (2.0 + 0.1 * top)).abs() < 1e-12);
        assert_eq!(a[(0, 1)], -1.0);
        assert_eq!(a[(0, 2)], 0.0);
        // Two-vertex path.
        let mut path = Graph::empty(2);
        path.connect(0, 1);
        let a = shifted_laplacian_cost(&path, 0.1, None).unwrap();
        assert!((a - DMatrix::from_row_slice(2, 2, &[1.2, -1.0, -1.0, 1.2])).amax() < 1e-14);
        let empty = gen_erdos_renyi(4, 0.0, 0).unwrap();
        assert!(shifted_laplacian_cost(&empty, 0.1, None).is_err());
        assert_eq!(shifted_laplacian_cost(&empty, 0.1, Some(0.5)).unwrap(), DMatrix::identity(4, 4) * 0.5);
    }

    #[test]
    fn geodesics() {
        let d = geodesic_distances(&gen_circular(6).unwrap());
        assert_eq!(d[0][3], 3);
        assert!((0..6).all(|i| d[i][i] == 0));
        let d = geodesic_distances(&gen_grid_planar(3, 3).unwrap());
        assert_eq!(d[0][8], 4);
        let d = geodesic_distances(&gen_erdos_renyi(4, 0.0, 0).unwrap());
        assert_eq!(d[0][1], UNREACHABLE);
        let directed = gen_grid_planar(3, 3).unwrap().lower_directed();
        assert_eq!(geodesic_distances(&directed)[0][8], 4);
        assert!(!directed.has_edge(0, 1) && directed.has_edge(1, 0));
    }

    #[test]
    fn sampling_statistics() {
        let model = GaussianModel::standard(DMatrix::zeros(2, 2), 1.0).unwrap();
        for seed in 0..3 {
            let (x, y) = sample_coupling(&model, 10_000, seed).unwrap();
            let cross = x.transpose() * &y / 10_000.0;
            assert!(cross.norm() <= 5.0 / 100.0);
            let cov = x.transpose() * &x / 10_000.0;
            assert!((cov - DMatrix::identity(2, 2)).amax() < 0.1);
        }
        let a = sample_coupling(&model, 50, 9).unwrap();
        assert_eq!(a, sample_coupling(&model, 50, 9).unwrap());
    }

    #[test]
    fn prepared_basis_is_centered_and_bounded() {
        let model = GaussianModel::standard(DMatrix::identity(2, 2), 1.0).unwrap();
        let (x, y) = sample_coupling(&model, 40, 1).unwrap();
        let (basis, kappa) = prepare_basis(x, y).unwrap();
        assert!(basis.is_centered());
        assert!(kappa > 0.0);
        let (xs, ys) = basis.samples().unwrap();
        assert!(xs.row_iter().chain(ys.row_iter()).all(|r| r.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn log_grid_is_descending() {
        let g = log_grid(0.01, 1.0, 3).unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 0.1).abs() < 1e-12 && (g[2] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn profile_has_exact_support_values() {
        let g = gen_circular(6).unwrap();
        let p = certificate_profile(&g, &[0.1, 1.0], false).unwrap();
        assert_eq!(p.rows.len(), 72);
        for r in &p.rows {
            if r.i == r.j {
                assert!((r.z - 1.0).abs() < 1e-8);
            } else if g.has_edge(r.i, r.j) {
                assert!((r.z + 1.0).abs() < 1e-8);
            }
        }
        let big = certificate_profile(&g, &[1e3], false).unwrap();
        let off = big.rows.iter().filter(|r| !r.on_support).map(|r| r.z.abs()).fold(0.0, f64::max);
        assert!(off <= 0.05);
    }

    #[test]
    fn directed_profile_runs() {
        let g = gen_grid_planar(2, 3).unwrap();
        let p = certificate_profile(&g, &[1.0], true).unwrap();
        for r in p.rows.iter().filter(|r| r.on_support && r.i != r.j) {
            assert!(r.i > r.j);
            assert!((r.z + 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn population_trial_recovers_support() {
        let g = gen_circular(5).unwrap();
        let model = graph_model(&g, 2.0).unwrap();
        assert!(model_margin(&model).unwrap() > 0.0);
        let top = analytic_null_threshold(&model).unwrap();
        let res = run_population_trial(&g, 2.0, &[1.01 * top, 1e-4 * top]).unwrap();
        assert_eq!(res[0].support_errors, 15);
        assert_eq!(res[1].support_errors, 0);
    }

    #[test]
    fn undersampled_trial_is_deterministic() {
        let g = gen_circular(4).unwrap();
        let model = graph_model(&g, 1.0).unwrap();
        let top = analytic_null_threshold(&model).unwrap();
        let lambdas = [0.5 * top, 0.05 * top];
        let a = run_sparsistency_trial(&g, 1.0, &lambdas, 16, 3, &TrialOptions::default()).unwrap();
        let b = run_sparsistency_trial(&g, 1.0, &lambdas, 16, 3, &TrialOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.ok() && r.support_errors > 0));
    }
}
