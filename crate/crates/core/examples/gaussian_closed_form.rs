//! Closed-form Gaussian entropic coupling: cross-covariance, `W` and its Hessian.

use nalgebra::DMatrix;
use sparse_iot::gaussian::{cross_covariance, gaussian_hessian, gaussian_w, GaussianModel};

fn main() -> sparse_iot::Result<()> {
    let scalar = GaussianModel::standard(DMatrix::from_element(1, 1, 1.0), 1.5)?;
    println!("scalar: Σ = {:.6}, W = {:.6}, ∇²W = {:.6}", cross_covariance(&scalar)?[(0, 0)], gaussian_w(&scalar)?, gaussian_hessian(&scalar)?[(0, 0)]);

    let a = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.0, 0.2, 0.8, -1.0]);
    let sa = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
    let model = GaussianModel::new(sa, DMatrix::identity(3, 3), a, 0.5)?;
    println!("Σ = {:.4}", cross_covariance(&model)?);
    let h = gaussian_hessian(&model)?;
    println!("Hessian is {}x{}, min eigenvalue {:.4e}", h.nrows(), h.ncols(), sparse_iot::linalg::min_eigenvalue(&h));
    Ok(())
}
