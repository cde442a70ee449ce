//! Closed forms for Gaussian marginals and the bilinear cost `xᵀ A y`.
//!
//! Here `ε` follows the Gaussian convention
//! `W(A) = sup_Σ ⟨A, Σ⟩ + (ε/2) log det(Σ_β − Σᵀ Σ_α⁻¹ Σ)`, which is the
//! entropic problem with a penalty `ε KL`. The discrete solvers use `(ε/2) KL`,
//! so the matching Sinkhorn regularization is `2ε` (see
//! [`GaussianModel::sinkhorn_eps`]).
//!
//! Everything goes through the change of variable `X = Σ_α^{1/2} A Σ_β^{1/2}`,
//! which reduces to identity covariances. With `X = U D Vᵀ` the optimal reduced
//! cross-covariance is `U D̃ Vᵀ`, computed here as a spectral function of `XᵀX`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certificates::{certificate_from_inverse, vanilla_certificate, Certificate};
use crate::eot::CostVector;
use crate::error::{input, numerical, IotError, Result};
use crate::linalg::{asymmetry, check_spd, min_eigenvalue, operator_matrix, spd_condition, sqrtm, symmetrize};

/// Largest condition number accepted for the Hessian's inner operator.
pub const MAX_INNER_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub sigma_alpha: DMatrix<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub eps: f64,
}

impl GaussianModel {
    pub fn new(sigma_alpha: DMatrix<f64>, sigma_beta: DMatrix<f64>, a: DMatrix<f64>, eps: f64) -> Result<Self> {
        let m = Self {
            sigma_alpha,
            sigma_beta,
            a,
            eps,
        };
        m.validate()?;
        Ok(m)
    }

    /// Identity covariances.
    pub fn standard(a: DMatrix<f64>, eps: f64) -> Result<Self> {
        let (d1, d2) = a.shape();
        Self::new(DMatrix::identity(d1, d1), DMatrix::identity(d2, d2), a, eps)
    }

    pub fn validate(&self) -> Result<()> {
        check_spd(&self.sigma_alpha, "sigma_alpha")?;
        check_spd(&self.sigma_beta, "sigma_beta")?;
        let (d1, d2) = self.a.shape();
        if self.sigma_alpha.nrows() != d1 || self.sigma_beta.nrows() != d2 {
            return input(format!(
                "A is {d1}x{d2} but covariances are {0}x{0} and {1}x{1}",
                self.sigma_alpha.nrows(),
                self.sigma_beta.nrows()
            ));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return input("A has non-finite entries");
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return input(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn with_a(&self, a: DMatrix<f64>) -> Self {
        Self { a, ..self.clone() }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.a.shape()
    }

    pub fn s(&self) -> usize {
        self.a.len()
    }

    /// Regularization to pass to the discrete solvers for the same coupling.
    pub fn sinkhorn_eps(&self) -> f64 {
        2.0 * self.eps
    }

    pub fn cost_vector(&self) -> CostVector {
        CostVector::from_matrix(&self.a)
    }
}

/// Pieces of the reduced problem shared by the closed forms.
struct Reduced {
    sa_half: DMatrix<f64>,
    sb_half: DMatrix<f64>,
    x: DMatrix<f64>,
    /// Reduced cross-covariance `Σ̃ = X g(XᵀX)`.
    st: DMatrix<f64>,
    /// Eigenvalues `d²` of `XᵀX`, clipped at zero.
    sq: Vec<f64>,
}

/// `d̃ = 2d / (ε + sqrt(ε² + 4d²))`, the root in `[0, 1)` of `d d̃² + ε d̃ − d = 0`.
pub fn reduced_singular_value(d: f64, eps: f64) -> f64 {
    d * ratio(d * d, eps)
}

/// `d̃ / d` as a function of `d²`. It is analytic at zero, which keeps `Σ`
/// accurate when `X` is rank deficient.
fn ratio(sq: f64, eps: f64) -> f64 {
    2.0 / (eps + (eps * eps + 4.0 * sq).sqrt())
}

fn reduce(model: &GaussianModel) -> Result<Reduced> {
    model.validate()?;
    let sa_half = sqrtm(&model.sigma_alpha);
    let sb_half = sqrtm(&model.sigma_beta);
    let x = &sa_half * &model.a * &sb_half;
    let eig = symmetrize(&(x.transpose() * &x)).symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return numerical("eigendecomposition of XᵀX failed");
    }
    let sq: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let g = DVector::from_iterator(sq.len(), sq.iter().map(|&v| ratio(v, model.eps)));
    let q = &eig.eigenvectors;
    let st = &x * q * DMatrix::from_diagonal(&g) * q.transpose();
    Ok(Reduced {
        sa_half,
        sb_half,
        x,
        st,
        sq,
    })
}

/// Cross-covariance `Σ = ∇W(A)` of the optimal Gaussian coupling.
pub fn cross_covariance(model: &GaussianModel) -> Result<DMatrix<f64>> {
    let r = reduce(model)?;
    Ok(&r.sa_half * &r.st * &r.sb_half)
}

/// The objective `⟨A, Σ⟩ + (ε/2) log det(Σ_β − Σᵀ Σ_α⁻¹ Σ)` at an arbitrary `Σ`.
pub fn gaussian_objective(model: &GaussianModel, sigma: &DMatrix<f64>) -> Result<f64> {
    let inv_a = model
        .sigma_alpha
        .clone()
        .cholesky()
        .ok_or_else(|| IotError::Input("sigma_alpha is not positive definite".into()))?;
    let schur = symmetrize(&(&model.sigma_beta - sigma.transpose() * inv_a.solve(sigma)));
    let chol = schur
        .cholesky()
        .ok_or_else(|| IotError::Numerical("log det of a matrix that is not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(model.a.dot(sigma) + 0.5 * model.eps * logdet)
}

/// `W(A)`, evaluated at the optimal `Σ` through the singular values of `X`.
pub fn gaussian_w(model: &GaussianModel) -> Result<f64> {
    let r = reduce(model)?;
    let eps = model.eps;
    let mut w = 0.0;
    // With g = d̃/d: d d̃ = d² g and 1 − d̃² = ε g = 1/(1 + d² g/ε).
    for &sq in &r.sq {
        let g = ratio(sq, eps);
        w += sq * g - 0.5 * eps * (sq * g / eps).ln_1p();
    }
    let logdet_b = 2.0
        * model
            .sigma_beta
            .clone()
            .cholesky()
            .ok_or_else(|| IotError::Input("sigma_beta is not positive definite".into()))?
            .l()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    Ok(w + 0.5 * eps * logdet_b)
}

/// Matrix of `Δ ↦ (εI + X Σ̃ᵀ) Δ (εI + Xᵀ Σ̃) + X Δᵀ X` on vec'd `d1 x d2` matrices.
///
/// At the optimum `εI + XᵀΣ̃ = ε(I − Σ̃ᵀΣ̃)⁻¹` and `εI + XΣ̃ᵀ = ε(I − Σ̃Σ̃ᵀ)⁻¹`,
/// so this is `ε²(I − Σ̃ᵀΣ̃)⁻¹ ⊗ (I − Σ̃Σ̃ᵀ)⁻¹ + (Xᵀ ⊗ X)𝕋` without any inverse.
fn inner_operator(r: &Reduced, eps: f64) -> DMatrix<f64> {
    let (d1, d2) = r.x.shape();
    let left = DMatrix::identity(d1, d1) * eps + &r.x * r.st.transpose();
    let right = DMatrix::identity(d2, d2) * eps + r.x.transpose() * &r.st;
    operator_matrix(d1, d2, |delta| &left * delta * &right + &r.x * delta.transpose() * &r.x)
}

/// `∇²W(A)` as an `s x s` matrix, `s = d1 d2`, in column-major vec order.
pub fn gaussian_hessian(model: &GaussianModel) -> Result<DMatrix<f64>> {
    let r = reduce(model)?;
    let inner = symmetrize(&inner_operator(&r, model.eps));
    let cond = spd_condition(&inner);
    if !(cond <= MAX_INNER_CONDITION) {
        return numerical(format!(
            "Hessian inner operator is near singular (condition {cond:e}) at eps = {}",
            model.eps
        ));
    }
    let inv = inner
        .cholesky()
        .ok_or_else(|| IotError::Numerical(format!("Hessian inner operator not invertible at eps = {}", model.eps)))?
        .inverse();
    let k = r.sb_half.kronecker(&r.sa_half);
    Ok(symmetrize(&(&k * inv * &k * model.eps)))
}

/// `(∇²W(A))⁻¹` for identity covariances and symmetric positive definite `A`,
/// restricted to symmetric matrices: `Ψ ↦ (1/ε) A (Σ⁻¹ Ψ Σ⁻¹ + Ψ) A`.
#[derive(Debug, Clone)]
pub struct SymmetricInverseHessian {
    a: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    eps: f64,
}

pub fn symmetric_restricted_inverse_hessian(a: &DMatrix<f64>, eps: f64) -> Result<SymmetricInverseHessian> {
    if !a.is_square() || asymmetry(a) > 1e-12 * (1.0 + a.amax()) {
        return input("A must be symmetric");
    }
    if min_eigenvalue(a) <= 0.0 {
        return input("A must be positive definite");
    }
    let model = GaussianModel::standard(symmetrize(a), eps)?;
    let sigma = symmetrize(&cross_covariance(&model)?);
    let sigma_inv = sigma
        .cholesky()
        .ok_or_else(|| IotError::Numerical("cross-covariance is not invertible".into()))?
        .inverse();
    Ok(SymmetricInverseHessian {
        a: symmetrize(a),
        sigma_inv: symmetrize(&sigma_inv),
        eps,
    })
}

impl SymmetricInverseHessian {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn apply(&self, psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if psi.shape() != self.a.shape() || asymmetry(psi) > 1e-12 * (1.0 + psi.amax()) {
            return input("operator acts on symmetric matrices of the model's size");
        }
        let inner = &self.sigma_inv * psi * &self.sigma_inv + psi;
        Ok(&self.a * inner * &self.a / self.eps)
    }
}

/// Certificate computed entirely on the symmetric subspace with the inverse
/// Hessian, which stays well conditioned as `ε → 0`.
pub fn symmetric_certificate(op: &SymmetricInverseHessian, a_hat: &DMatrix<f64>) -> Result<Certificate> {
    let d = op.dim();
    if a_hat.shape() != (d, d) || asymmetry(a_hat) > 1e-12 * (1.0 + a_hat.amax()) {
        return input("certificate pattern must be a symmetric matrix of the operator's size");
    }
    // Orthonormal basis of symmetric matrices indexed by i ≤ j.
    let mut basis = Vec::new();
    for j in 0..d {
        for i in 0..=j {
            let mut e = DMatrix::zeros(d, d);
            if i == j {
                e[(i, i)] = 1.0;
            } else {
                let w = std::f64::consts::FRAC_1_SQRT_2;
                e[(i, j)] = w;
                e[(j, i)] = w;
            }
            basis.push((i, j, e));
        }
    }
    let m = basis.len();
    let images: Vec<DMatrix<f64>> = basis.iter().map(|(_, _, e)| op.apply(e)).collect::<Result<_>>()?;
    let k = DMatrix::from_fn(m, m, |p, q| basis[p].2.dot(&images[q]));
    // In these coordinates an entry z_ij (i < j) has coordinate √2 z_ij.
    let coords = CostVector::new(
        basis
            .iter()
            .map(|&(i, j, _)| if i == j { a_hat[(i, i)] } else { a_hat[(i, j)] })
            .collect(),
    );
    let support = coords.support().to_vec();
    if support.is_empty() {
        return input("certificate needs a non-empty support");
    }
    let scale: Vec<f64> = basis
        .iter()
        .map(|&(i, j, _)| if i == j { 1.0 } else { std::f64::consts::SQRT_2 })
        .collect();
    // Fix w_I = scale_I · sign and minimize wᵀ K w over the free coordinates.
    let free: Vec<usize> = (0..m).filter(|p| !support.contains(p)).collect();
    let mut w = vec![0.0; m];
    let signs = coords.signs();
    for &p in &support {
        w[p] = scale[p] * signs[p];
    }
    if !free.is_empty() {
        let wi = DVector::from_iterator(support.len(), support.iter().map(|&p| w[p]));
        let kff = symmetrize(&k.select_rows(&free).select_columns(&free));
        let kfi = k.select_rows(&free).select_columns(&support);
        let wf = -kff
            .cholesky()
            .ok_or_else(|| IotError::Numerical("restricted inverse Hessian is singular".into()))?
            .solve(&(kfi * wi));
        for (&p, v) in free.iter().zip(wf.iter()) {
            w[p] = *v;
        }
    }
    let mut z = DMatrix::zeros(d, d);
    for (p, &(i, j, _)) in basis.iter().enumerate() {
        let v = w[p] / scale[p];
        z[(i, j)] = v;
        z[(j, i)] = v;
    }
    let full = CostVector::from_matrix(a_hat);
    let mut zv = z.as_slice().to_vec();
    for &i in full.support() {
        zv[i] = full.signs()[i];
    }
    Ok(Certificate::new(zv, full.support().to_vec()))
}

/// `ε → ∞` limit: the vanilla certificate of `H = Σ_β ⊗ Σ_α`.
pub fn limit_certificate_inf(
    sigma_alpha: &DMatrix<f64>,
    sigma_beta: &DMatrix<f64>,
    a_hat: &CostVector,
) -> Result<Certificate> {
    check_spd(sigma_alpha, "sigma_alpha")?;
    check_spd(sigma_beta, "sigma_beta")?;
    vanilla_certificate(&sigma_beta.kronecker(sigma_alpha), a_hat)
}

/// `ε → 0` limit for symmetric positive definite `Â` and identity
/// covariances: the vanilla certificate of `H = Â⁻¹ ⊗ Â⁻¹`, which is the
/// graphical-lasso certificate.
pub fn limit_certificate_zero(a_hat: &DMatrix<f64>) -> Result<Certificate> {
    if !a_hat.is_square() || asymmetry(a_hat) > 1e-12 * (1.0 + a_hat.amax()) {
        return input("A_hat must be symmetric");
    }
    check_spd(a_hat, "A_hat")?;
    // The inverse of H is A ⊗ A, so no inverse has to be formed.
    let k = a_hat.kronecker(a_hat);
    certificate_from_inverse(&k, &CostVector::from_matrix(a_hat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCovariance {
    pub matrix: DMatrix<f64>,
    pub d1: usize,
    pub d2: usize,
}

impl JointCovariance {
    pub fn cross(&self) -> DMatrix<f64> {
        self.matrix.view((0, self.d1), (self.d1, self.d2)).into_owned()
    }

    /// `Σ_α − Σ Σ_β⁻¹ Σᵀ`, the covariance of `x` given `y`.
    pub fn conditional_x(&self) -> Result<DMatrix<f64>> {
        let (d1, d2) = (self.d1, self.d2);
        let sa = self.matrix.view((0, 0), (d1, d1)).into_owned();
        let sb = self.matrix.view((d1, d1), (d2, d2)).into_owned();
        let s = self.cross();
        let chol = sb
            .cholesky()
            .ok_or_else(|| IotError::Numerical("sigma_beta block is not positive definite".into()))?;
        Ok(symmetrize(&(sa - &s * chol.solve(&s.transpose()))))
    }
}

/// `[[Σ_α, Σ], [Σᵀ, Σ_β]]` for the optimal coupling.
pub fn joint_covariance(model: &GaussianModel) -> Result<JointCovariance> {
    let sigma = cross_covariance(model)?;
    let (d1, d2) = model.dims();
    let mut m = DMatrix::zeros(d1 + d2, d1 + d2);
    m.view_mut((0, 0), (d1, d1)).copy_from(&model.sigma_alpha);
    m.view_mut((d1, d1), (d2, d2)).copy_from(&model.sigma_beta);
    m.view_mut((0, d1), (d1, d2)).copy_from(&sigma);
    m.view_mut((d1, 0), (d2, d1)).copy_from(&sigma.transpose());
    let m = symmetrize(&m);
    let lo = min_eigenvalue(&m);
    if lo < -1e-10 * (1.0 + m.amax()) {
        return Err(IotError::Numerical(format!(
            "joint covariance is not positive semi-definite (min eigenvalue {lo:e})"
        )));
    }
    Ok(JointCovariance { matrix: m, d1, d2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(sa: f64, sb: f64, a: f64, eps: f64) -> GaussianModel {
        GaussianModel::new(
            DMatrix::from_element(1, 1, sa),
            DMatrix::from_element(1, 1, sb),
            DMatrix::from_element(1, 1, a),
            eps,
        )
        .unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(d, d) * 0.5
    }

    /// Golden-section maximization of the scalar objective over Σ.
    fn scalar_argmax(m: &GaussianModel) -> f64 {
        let bound = (m.sigma_alpha[(0, 0)] * m.sigma_beta[(0, 0)]).sqrt();
        let f = |s: f64| gaussian_objective(m, &DMatrix::from_element(1, 1, s)).unwrap_or(f64::NEG_INFINITY);
        let (mut lo, mut hi) = (-bound * (1.0 - 1e-15), bound * (1.0 - 1e-15));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = hi - g * (hi - lo);
            let d = lo + g * (hi - lo);
            if f(c) > f(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scalar_cross_covariances() {
        let m = scalar(1.0, 1.0, 1.0, 1.5);
        let s = cross_covariance(&m).unwrap()[(0, 0)];
        assert!((s - 0.5).abs() <= 1e-15);
        assert!((scalar_argmax(&m) - 0.5).abs() <= 1e-6);
        let m2 = scalar(4.0, 1.0, 0.5, 1.5);
        assert_relative_eq!(cross_covariance(&m2).unwrap()[(0, 0)], 1.0, epsilon = 1e-14);
        assert!((scalar_argmax(&m2) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_cost_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = GaussianModel::new(random_spd(&mut rng, 2), random_spd(&mut rng, 3), DMatrix::zeros(2, 3), 0.7).unwrap();
        assert_eq!(cross_covariance(&m).unwrap(), DMatrix::zeros(2, 3));
        let id = GaussianModel::standard(DMatrix::zeros(3, 3), 1.0).unwrap();
        assert!(gaussian_w(&id).unwrap().abs() < 1e-15);
        let j = joint_covariance(&m).unwrap();
        assert!(j.cross().amax() == 0.0);
    }

    #[test]
    fn scalar_w_value() {
        let m = scalar(1.0, 1.0, 1.0, 1.5);
        let want = 0.5 + 0.75 * 0.75f64.ln();
        assert_relative_eq!(gaussian_w(&m).unwrap(), want, epsilon = 1e-14);
        assert!((want - 0.28423).abs() < 1e-5);
    }

    #[test]
    fn w_is_a_maximum_and_matches_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let m = GaussianModel::new(random_spd(&mut rng, 2), random_spd(&mut rng, 3), a, 0.8).unwrap();
        let sigma = cross_covariance(&m).unwrap();
        let w = gaussian_w(&m).unwrap();
        assert_relative_eq!(gaussian_objective(&m, &sigma).unwrap(), w, epsilon = 1e-12);
        for _ in 0..20 {
            let delta = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-0.05..0.05));
            if let Ok(v) = gaussian_objective(&m, &(&sigma + delta)) {
                assert!(v <= w + 1e-12);
            }
        }
    }

    #[test]
    fn cross_covariance_is_gradient_of_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let m = GaussianModel::new(random_spd(&mut rng, 3), random_spd(&mut rng, 2), a, rng.gen_range(0.3..2.0)).unwrap();
            let sigma = cross_covariance(&m).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut ap = m.a.clone();
                let mut am = m.a.clone();
                ap.as_mut_slice()[k] += h;
                am.as_mut_slice()[k] -= h;
                let fd = (gaussian_w(&m.with_a(ap)).unwrap() - gaussian_w(&m.with_a(am)).unwrap()) / (2.0 * h);
                let want = sigma.as_slice()[k];
                assert!((fd - want).abs() <= 1e-5 * want.abs().max(1e-2), "{fd} vs {want}");
            }
        }
    }

    #[test]
    fn scalar_hessian() {
        let h = gaussian_hessian(&scalar(1.0, 1.0, 1.0, 1.5)).unwrap();
        assert!((h[(0, 0)] - 0.3).abs() <= 1e-15, "{}", h[(0, 0)]);
    }

    #[test]
    fn hessian_matches_finite_differences_of_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let m = GaussianModel::new(random_spd(&mut rng, 3), random_spd(&mut rng, 3), a, rng.gen_range(0.3..2.0)).unwrap();
            let hess = gaussian_hessian(&m).unwrap();
            let h = 1e-6;
            for k in 0..9 {
                let mut ap = m.a.clone();
                let mut am = m.a.clone();
                ap.as_mut_slice()[k] += h;
                am.as_mut_slice()[k] -= h;
                let col = (cross_covariance(&m.with_a(ap)).unwrap() - cross_covariance(&m.with_a(am)).unwrap()) / (2.0 * h);
                let err = (DVector::from_column_slice(col.as_slice()) - hess.column(k)).amax();
                assert!(err <= 1e-5 * hess.amax(), "column {k}: {err:e}");
            }
            assert!(min_eigenvalue(&hess) > 0.0);
        }
    }

    #[test]
    fn rectangular_and_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        let v = DMatrix::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0));
        let m = GaussianModel::new(random_spd(&mut rng, 3), random_spd(&mut rng, 2), u * v, 0.9).unwrap();
        let hess = gaussian_hessian(&m).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut ap = m.a.clone();
            let mut am = m.a.clone();
            ap.as_mut_slice()[k] += h;
            am.as_mut_slice()[k] -= h;
            let col = (cross_covariance(&m.with_a(ap)).unwrap() - cross_covariance(&m.with_a(am)).unwrap()) / (2.0 * h);
            let err = (DVector::from_column_slice(col.as_slice()) - hess.column(k)).amax();
            assert!(err <= 1e-5 * hess.amax(), "column {k}: {err:e}");
        }
        assert!(joint_covariance(&m).is_ok());
    }

    /// The square-invertible closed form with the `Σ_α⁻¹` Schur complement.
    #[test]
    fn agrees_with_square_invertible_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 2;
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(d, d);
        let m = GaussianModel::new(random_spd(&mut rng, d), random_spd(&mut rng, d), a.clone(), 0.6).unwrap();
        let s = cross_covariance(&m).unwrap();
        let eps = m.eps;
        let sa_inv = m.sigma_alpha.clone().try_inverse().unwrap();
        let sb_inv = m.sigma_beta.clone().try_inverse().unwrap();
        let left = (&m.sigma_beta - s.transpose() * &sa_inv * &s).try_inverse().unwrap();
        let right = (&m.sigma_alpha - &s * &sb_inv * s.transpose()).try_inverse().unwrap();
        let t = crate::linalg::commutation(d, d);
        let inner = left.kronecker(&right) * (eps * eps) + a.transpose().kronecker(&a) * t;
        let want = inner.try_inverse().unwrap() * eps;
        assert_relative_eq!(gaussian_hessian(&m).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn large_eps_hessian_is_identity_over_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let eps = 1e6;
        let h = gaussian_hessian(&GaussianModel::standard(a, eps).unwrap()).unwrap() * eps;
        assert!((h - DMatrix::identity(6, 6)).amax() <= 1e-4);
    }

    #[test]
    fn large_eps_expansion_of_reduced_sigma() {
        // ε Σ̃ = X − X Xᵀ X / ε² + O(ε⁻⁴): the error of the two-term expansion
        // drops by ~ε² per decade squared.
        let x = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, -0.2, 0.5]);
        let err = |eps: f64| {
            let s = cross_covariance(&GaussianModel::standard(x.clone(), eps).unwrap()).unwrap() * eps;
            let approx = &x - &x * x.transpose() * &x / (eps * eps);
            (s - approx).amax()
        };
        let ratio = err(1e2) / err(1e3);
        assert!(ratio > 1e4 * 0.8 && ratio < 1e4 * 1.25, "ratio {ratio}");
        // Leading-order error ratio, as a check on the d/ε − d³/ε³ singular values.
        let lead = |eps: f64| {
            let s = cross_covariance(&GaussianModel::standard(x.clone(), eps).unwrap()).unwrap() * eps;
            (s - &x).amax()
        };
        let r2 = lead(1e2) / lead(1e3);
        assert!((r2 / 100.0 - 1.0).abs() < 0.01, "ratio {r2}");
    }

    #[test]
    fn symmetric_operator_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_spd(&mut rng, 3);
        let eps = 0.7;
        let op = symmetric_restricted_inverse_hessian(&a, eps).unwrap();
        let h = gaussian_hessian(&GaussianModel::standard(a.clone(), eps).unwrap()).unwrap();
        let hinv = h.try_inverse().unwrap();
        for _ in 0..20 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let psi = &b + b.transpose();
            let got = op.apply(&psi).unwrap();
            assert!(asymmetry(&got) < 1e-12);
            let want = &hinv * DVector::from_column_slice(psi.as_slice());
            let err = (DVector::from_column_slice(got.as_slice()) - &want).amax();
            assert!(err <= 1e-8 * want.amax(), "{err:e}");
        }
        assert!(op.apply(&DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn symmetric_operator_small_eps_identity() {
        let eps = 1e-6;
        let op = symmetric_restricted_inverse_hessian(&DMatrix::identity(2, 2), eps).unwrap();
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -2.0]);
        let got = op.apply(&psi).unwrap() * eps;
        assert!((got - psi * 2.0).amax() < 1e-5);
    }

    #[test]
    fn limit_certificates_basic() {
        let a = CostVector::new(vec![1.0, 0.0, 0.0, 1.0]);
        let c = limit_certificate_inf(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2), &a).unwrap();
        assert_eq!(c.z, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.margin, 1.0);
        let sa = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let c = limit_certificate_inf(&sa, &DMatrix::identity(2, 2), &CostVector::new(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(DVector::from_vec(c.z), DVector::from_vec(vec![1.0, 0.5, 0.0, 0.0]), epsilon = 1e-14);
        let c0 = limit_certificate_zero(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(c0.z, CostVector::from_matrix(&DMatrix::identity(3, 3)).signs());
        let c0 = limit_certificate_zero(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        assert_eq!(c0.z, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(limit_certificate_zero(&DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0])).is_err());
    }

    #[test]
    fn tridiagonal_zero_limit_against_dense_oracle() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let c = limit_certificate_zero(&a).unwrap();
        let inv = a.clone().try_inverse().unwrap();
        let h = inv.kronecker(&inv);
        let oracle = vanilla_certificate(&h, &CostVector::from_matrix(&a)).unwrap();
        // Corner entries (0,2) and (2,0) in vec order.
        for k in [6usize, 2] {
            assert!((c.z[k].abs() - oracle.z[k].abs()).abs() <= 1e-10);
        }
        assert_relative_eq!(c.margin, oracle.margin, epsilon = 1e-10);
    }

    #[test]
    fn large_eps_certificate_approaches_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sa = random_spd(&mut rng, 2);
        let sb = random_spd(&mut rng, 2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.7]);
        let pattern = CostVector::from_matrix(&a);
        let lim = limit_certificate_inf(&sa, &sb, &pattern).unwrap();
        let h = gaussian_hessian(&GaussianModel::new(sa, sb, a, 1e3).unwrap()).unwrap();
        let z = vanilla_certificate(&h, &pattern).unwrap();
        let gap = z.z.iter().zip(&lim.z).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap <= 0.02, "gap {gap}");
    }

    #[test]
    fn symmetric_certificate_matches_full_vanilla() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        for eps in [0.1, 1.0, 10.0] {
            let op = symmetric_restricted_inverse_hessian(&a, eps).unwrap();
            let zs = symmetric_certificate(&op, &a).unwrap();
            let h = gaussian_hessian(&GaussianModel::standard(a.clone(), eps).unwrap()).unwrap();
            let zv = vanilla_certificate(&h, &CostVector::from_matrix(&a)).unwrap();
            for (x, y) in zs.z.iter().zip(&zv.z) {
                assert!((x - y).abs() < 1e-9, "eps {eps}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn schur_complement_small_eps() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ainv = a.clone().try_inverse().unwrap();
        let err = |eps: f64| {
            let j = joint_covariance(&GaussianModel::standard(a.clone(), eps).unwrap()).unwrap();
            (j.conditional_x().unwrap() - &ainv * eps).amax()
        };
        let e = err(1e-3);
        assert!(e <= 10.0 * 1e-6, "{e:e}");
        // Second order: shrinking ε tenfold shrinks the error ~hundredfold.
        let r = err(1e-2) / err(1e-3);
        assert!(r > 50.0 && r < 200.0, "{r}");
    }

    #[test]
    fn scalar_joint_covariance() {
        let j = joint_covariance(&scalar(1.0, 1.0, 1.0, 1.5)).unwrap();
        assert_relative_eq!(j.matrix, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianModel::new(bad, DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 1.0),
            Err(IotError::Input(_))
        ));
    }
}
