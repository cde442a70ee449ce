//! Vanilla and minimal-norm certificates for a graph cost.

use sparse_iot::certificates::{min_norm_certificate, vanilla_certificate};
use sparse_iot::gaussian::gaussian_hessian;
use sparse_iot::graph::{gen_circular, graph_model};

fn main() -> sparse_iot::Result<()> {
    let g = gen_circular(6)?;
    for eps in [0.1, 1.0, 5.0] {
        let model = graph_model(&g, eps)?;
        let h = gaussian_hessian(&model)?;
        let pattern = model.cost_vector();
        let v = vanilla_certificate(&h, &pattern)?;
        let m = min_norm_certificate(&h, &pattern, 1e-10)?;
        println!(
            "ε = {eps:4}: vanilla margin {:+.4}, minimal-norm off-support max {:.4}",
            v.margin,
            m.off_support_max()
        );
    }
    Ok(())
}
