//! Warm-started path over decreasing λ; the support grows as λ shrinks.

use sparse_iot::graph::{gen_circular, graph_model, log_grid, prepare_basis, sample_coupling, support_errors};
use sparse_iot::iot::{null_threshold, reg_path, SolverConfig};

fn main() -> sparse_iot::Result<()> {
    let g = gen_circular(5)?;
    let model = graph_model(&g, 2.0)?;
    let (x, y) = sample_coupling(&model, 1000, 3)?;
    let (basis, kappa) = prepare_basis(x, y)?;
    let top = null_threshold(&basis)?;
    let lambdas: Vec<f64> = log_grid(1.0, 1e-3, 10)?.iter().map(|r| r * top).collect();
    let config = SolverConfig::new(lambdas[0], model.sinkhorn_eps());
    for (lambda, sol) in lambdas.iter().zip(reg_path(&basis, &lambdas, &config)?) {
        let sol = sol?;
        let est = sol.a.to_matrix(5, 5) / kappa;
        println!(
            "λ/λ_max = {:.4}  |support| = {:2}  errors = {:2}  converged = {}",
            lambda / top,
            sol.a.support().len(),
            support_errors(&est, &model.a),
            sol.converged
        );
    }
    Ok(())
}
