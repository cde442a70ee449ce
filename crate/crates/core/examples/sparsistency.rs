//! Support recovery along a λ grid, on exact moments and on samples.

use sparse_iot::graph::{
    analytic_null_threshold, gen_circular, graph_model, log_grid, run_population_trial, run_sparsistency_trial,
    TrialOptions,
};

fn main() -> sparse_iot::Result<()> {
    let g = gen_circular(6)?;
    for eps in [0.5, 5.0] {
        let top = analytic_null_threshold(&graph_model(&g, eps)?)?;
        let grid: Vec<f64> = log_grid(1.0, 1e-3, 8)?.iter().map(|r| r * top).collect();
        let exact = run_population_trial(&g, eps, &grid)?;
        let sampled = run_sparsistency_trial(&g, eps, &grid, 1000, 0, &TrialOptions::default())?;
        println!("ε = {eps} (margin {:+.3})", exact[0].margin);
        for (e, s) in exact.iter().zip(&sampled) {
            println!("  λ = {:.2e}: exact-moment errors {:2}, 1000-sample errors {:2}", e.lambda, e.support_errors, s.support_errors);
        }
    }
    Ok(())
}
