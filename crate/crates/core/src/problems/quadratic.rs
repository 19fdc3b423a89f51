//! Gradient descent on `g(x) = ½xᵀQx − θᵀx`.

use rand::Rng;

use crate::bounds::ConstantsEstimate;
use crate::error::{Error, Result};
use crate::fixed_point::AlgorithmMap;
use crate::linalg::{symmetric_eigenvalues, Cholesky, Matrix, Vector};
use crate::problems::data::{log_spaced, random_spd};
use crate::problems::{gd_contraction, StepRule};

/// `F(x, θ) = x − α(Qx − θ)` with fixed point `Q⁻¹θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInner {
    q: Matrix,
    alpha: f64,
    mu: f64,
    l: f64,
}

impl QuadraticInner {
    pub fn new(q: Matrix, alpha: f64) -> Result<Self> {
        let (mu, l) = spectrum_bounds(&q)?;
        if !(alpha > 0.0 && alpha < 2.0 / l) {
            return Err(Error::InvalidArgument(format!(
                "step {alpha} outside (0, 2/L) with L = {l}"
            )));
        }
        Ok(Self { q, alpha, mu, l })
    }

    pub fn with_rule(q: Matrix, rule: StepRule) -> Result<Self> {
        let (mu, l) = spectrum_bounds(&q)?;
        Self::new(q, rule.step(mu, l))
    }

    /// `Q = U diag(λ) Uᵀ` with random orthogonal `U` and eigenvalues log-spaced in `[1, cond]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, cond: f64, rule: StepRule) -> Result<Self> {
        if !(cond >= 1.0) {
            return Err(Error::InvalidArgument(format!("condition number {cond} below 1")));
        }
        Self::with_rule(random_spd(rng, &log_spaced(1.0, cond, n)), rule)
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn rho(&self) -> f64 {
        gd_contraction(self.alpha, self.mu, self.l)
    }

    pub fn fixed_point(&self, theta: &Vector) -> Result<Vector> {
        Ok(Cholesky::factor(&self.q)?.solve_vec(theta)?)
    }

    /// `∂x̄/∂θ = Q⁻¹`.
    pub fn truth_jacobian(&self) -> Result<Matrix> {
        Ok(Cholesky::factor(&self.q)?.solve(&Matrix::identity(self.q.rows()))?)
    }
}

fn spectrum_bounds(q: &Matrix) -> Result<(f64, f64)> {
    if !q.is_square() || q.rows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "Q must be square and nonempty, got {:?}",
            q.shape()
        )));
    }
    if !q.is_finite() {
        return Err(Error::NonFinite("quadratic matrix"));
    }
    if !q.is_symmetric(1e-12 * q.max_abs().max(1.0)) {
        return Err(Error::InvalidArgument("Q is not symmetric".into()));
    }
    let eig = symmetric_eigenvalues(q)?;
    let (mu, l) = (eig[0], eig[eig.len() - 1]);
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Q is not positive definite (λmin = {mu:e})"
        )));
    }
    Ok((mu, l))
}

impl AlgorithmMap for QuadraticInner {
    fn dims(&self) -> (usize, usize) {
        (self.q.rows(), self.q.rows())
    }

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        let mut grad = &self.q.matvec(x) - theta;
        grad = &grad * (-self.alpha);
        Ok(x + &grad)
    }

    fn jac_x(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        let mut j = self.q.scale(-self.alpha);
        j.add_diag(1.0);
        Ok(j)
    }

    fn jac_theta(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_diag(&vec![self.alpha; self.q.rows()]))
    }

    fn analytic_constants(&self, _theta: &Vector) -> Option<ConstantsEstimate> {
        let rho = self.rho();
        Some(ConstantsEstimate::analytic(rho, self.alpha, 0.0, 0.0, rho))
    }
}
