//! Estimate a sparse graph cost from paired samples.

use sparse_iot::graph::{gen_circular, graph_model, prepare_basis, sample_coupling, support_errors};
use sparse_iot::iot::{null_threshold, solve, SolverConfig};

fn main() -> sparse_iot::Result<()> {
    let g = gen_circular(6)?;
    let eps = 5.0;
    let model = graph_model(&g, eps)?;
    let (x, y) = sample_coupling(&model, 2000, 0)?;
    let (basis, kappa) = prepare_basis(x, y)?;
    let lambda = 0.05 * null_threshold(&basis)?;
    let sol = solve(&basis, &SolverConfig::new(lambda, model.sinkhorn_eps()))?;
    let est = sol.a.to_matrix(6, 6) / kappa;
    println!("converged {} in {} iterations, ‖z^λ‖∞ = {:.6}", sol.converged, sol.iterations, sol.kkt_sup);
    println!("estimate {:.3}", est);
    println!("truth {:.3}", model.a);
    println!("support errors: {}", support_errors(&est, &model.a));
    Ok(())
}
