//! The Lasso (ε → ∞) and graphical lasso (ε → 0) limits of Gaussian iOT.

use nalgebra::DMatrix;
use sparse_iot::gaussian::GaussianModel;
use sparse_iot::limits::{glasso_solve, lasso_solve, LimitProblemSpec};
use sparse_iot::population::{solve_on_model, PopulationConfig};

fn main() -> sparse_iot::Result<()> {
    let a_hat = DMatrix::from_row_slice(3, 3, &[2.0, -0.8, 0.0, -0.8, 2.0, -0.8, 0.0, -0.8, 2.0]);
    let id = DMatrix::identity(3, 3);
    let lambda0 = 0.1;

    let lasso = lasso_solve(&LimitProblemSpec::lasso(id.clone(), id, a_hat.clone(), lambda0)?, 1e-12)?;
    for eps in [10.0, 100.0, 1000.0] {
        let pop = solve_on_model(&GaussianModel::standard(a_hat.clone(), eps)?, &PopulationConfig::new(lambda0 / eps))?;
        println!("ε = {eps:7}: ‖A − A_lasso‖∞ = {:.2e}", (&pop.a - &lasso.a).amax());
    }
    let glasso = glasso_solve(&LimitProblemSpec::glasso(a_hat.clone(), lambda0)?, 1e-12)?;
    for eps in [0.1, 0.01, 0.001] {
        let pop = solve_on_model(&GaussianModel::standard(a_hat.clone(), eps)?, &PopulationConfig::new(lambda0 * eps))?;
        println!("ε = {eps:7}: ‖A − A_glasso‖∞ = {:.2e}", (&pop.a - &glasso.a).amax());
    }
    Ok(())
}
