//! Forward entropic transport on samples: coupling, loss and gradient in `A`.

use nalgebra::DMatrix;
use sparse_iot::eot::{forward, grad_w, loss, CostBasis, CostVector, SinkhornOptions};
use sparse_iot::gaussian::GaussianModel;
use sparse_iot::graph::sample_coupling;

fn main() -> sparse_iot::Result<()> {
    let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.0, -0.7]);
    let model = GaussianModel::standard(truth.clone(), 1.0)?;
    let (x, y) = sample_coupling(&model, 200, 7)?;
    let basis = CostBasis::bilinear(x, y)?;
    let a = CostVector::from_matrix(&truth);
    let eps = model.sinkhorn_eps();

    let sol = forward(a.values(), &basis, eps, &SinkhornOptions::default())?;
    println!("{} iterations, marginal residual {:.1e}, value {:.6}", sol.iterations, sol.marginal_residual, sol.value);
    println!("loss at truth {:.6}, at zero {:.6}", loss(&a, &basis, eps)?, loss(&CostVector::zeros(4), &basis, eps)?);
    println!("∇W(truth) = {:.4?}", grad_w(&a, &basis, eps)?.as_slice());
    Ok(())
}
