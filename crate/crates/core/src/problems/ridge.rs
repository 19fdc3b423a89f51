//! Gradient descent on sample-weighted ridge regression
//! `g(x, θ) = ½ Σᵢ θᵢ (⟨aᵢ, x⟩ − yᵢ)² + ½λ‖x‖²`.

use crate::bounds::ConstantsEstimate;
use crate::error::{Error, Result};
use crate::fixed_point::AlgorithmMap;
use crate::linalg::{operator_norm, symmetric_eigenvalues, Cholesky, Matrix, Vector};
use crate::problems::{gd_contraction, StepRule};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRidge {
    /// `N × n`, one sample per row.
    pub design: Matrix,
    pub targets: Vector,
    pub lambda: f64,
}

impl WeightedRidge {
    pub fn new(design: Matrix, targets: Vector, lambda: f64) -> Result<Self> {
        if design.rows() != targets.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} targets",
                design.rows(),
                targets.dim()
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ridge penalty must be positive, got {lambda}"
            )));
        }
        if !design.is_finite() || !targets.is_finite() {
            return Err(Error::NonFinite("ridge data"));
        }
        Ok(Self {
            design,
            targets,
            lambda,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.design.rows()
    }

    pub fn n_features(&self) -> usize {
        self.design.cols()
    }

    fn check_theta(&self, theta: &Vector) -> Result<()> {
        if theta.dim() != self.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "{} sample weights for {} samples",
                theta.dim(),
                self.n_samples()
            )));
        }
        Ok(())
    }

    /// `Ax − y`.
    pub fn residuals(&self, x: &Vector) -> Vector {
        &self.design.matvec(x) - &self.targets
    }

    pub fn objective(&self, x: &Vector, theta: &Vector) -> f64 {
        let r = self.residuals(x);
        0.5 * r.iter().zip(theta.iter()).map(|(r, t)| t * r * r).sum::<f64>() + 0.5 * self.lambda * x.norm_sq()
    }

    pub fn gradient(&self, x: &Vector, theta: &Vector) -> Vector {
        let r = self.residuals(x);
        let wr = Vector::from_fn(r.dim(), |i| theta[i] * r[i]);
        let mut g = self.design.tr_matvec(&wr);
        g.axpy(self.lambda, x);
        g
    }

    /// `AᵀDiag(θ)A + λI`.
    pub fn hessian(&self, theta: &Vector) -> Matrix {
        let a = &self.design;
        let weighted = Matrix::from_fn(a.rows(), a.cols(), |i, j| theta[i] * a.get(i, j));
        let mut h = a.tr_matmul(&weighted);
        h.add_diag(self.lambda);
        h
    }

    /// `(µ, L)`: extreme eigenvalues of the Hessian at `θ`.
    pub fn curvature(&self, theta: &Vector) -> Result<(f64, f64)> {
        self.check_theta(theta)?;
        let eig = symmetric_eigenvalues(&self.hessian(theta))?;
        Ok((eig[0], eig[eig.len() - 1]))
    }

    /// Closed-form minimiser `x̄(θ) = H(θ)⁻¹Aᵀ(θ ∘ y)`.
    pub fn solve(&self, theta: &Vector) -> Result<Vector> {
        self.check_theta(theta)?;
        let wy = Vector::from_fn(self.n_samples(), |i| theta[i] * self.targets[i]);
        Ok(Cholesky::factor(&self.hessian(theta))?.solve_vec(&self.design.tr_matvec(&wy))?)
    }
}

/// `∂x̄/∂θ`, whose column `i` is `H⁻¹aᵢ(yᵢ − ⟨aᵢ, x̄⟩)`.
pub fn ridge_truth_jacobian(prob: &WeightedRidge, theta: &Vector) -> Result<Matrix> {
    let x = prob.solve(theta)?;
    let r = prob.residuals(&x);
    let a = &prob.design;
    let rhs = Matrix::from_fn(a.cols(), a.rows(), |j, i| -a.get(i, j) * r[i]);
    Ok(Cholesky::factor(&prob.hessian(theta))?.solve(&rhs)?)
}

/// `F(x, θ) = x − α∇ₓg(x, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeMap {
    prob: WeightedRidge,
    alpha: f64,
    /// `‖A‖op · maxᵢ‖aᵢ‖`
    design_scale: f64,
}

/// Ridge gradient map with the step chosen by `rule` from the curvature at `theta_ref`.
pub fn ridge_map(prob: WeightedRidge, rule: StepRule, theta_ref: &Vector) -> Result<RidgeMap> {
    let (mu, l) = prob.curvature(theta_ref)?;
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ridge Hessian not positive definite at reference weights (λmin = {mu:e})"
        )));
    }
    RidgeMap::with_alpha(prob, rule.step(mu, l))
}

impl RidgeMap {
    pub fn with_alpha(prob: WeightedRidge, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {alpha}"
            )));
        }
        let a = &prob.design;
        let max_row = (0..a.rows()).map(|i| a.row_vector(i).norm()).fold(0.0, f64::max);
        let design_scale = operator_norm(a) * max_row;
        Ok(Self {
            prob,
            alpha,
            design_scale,
        })
    }

    pub fn problem(&self) -> &WeightedRidge {
        &self.prob
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl AlgorithmMap for RidgeMap {
    fn dims(&self) -> (usize, usize) {
        (self.prob.n_features(), self.prob.n_samples())
    }

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        let mut next = x.clone();
        next.axpy(-self.alpha, &self.prob.gradient(x, theta));
        Ok(next)
    }

    fn jac_x(&self, _x: &Vector, theta: &Vector) -> Result<Matrix> {
        let mut j = self.prob.hessian(theta).scale(-self.alpha);
        j.add_diag(1.0);
        Ok(j)
    }

    fn jac_theta(&self, x: &Vector, _theta: &Vector) -> Result<Matrix> {
        let r = self.prob.residuals(x);
        let a = &self.prob.design;
        Ok(Matrix::from_fn(a.cols(), a.rows(), |j, i| {
            -self.alpha * a.get(i, j) * r[i]
        }))
    }

    /// `ρ = ‖I − αH(θ)‖op`, `L_F = ‖J_θF(x̄, θ)‖op`, `L_J = α‖A‖op maxᵢ‖aᵢ‖`.
    fn analytic_constants(&self, theta: &Vector) -> Option<ConstantsEstimate> {
        let (mu, l) = self.prob.curvature(theta).ok()?;
        let rho = gd_contraction(self.alpha, mu, l);
        let x_bar = self.prob.solve(theta).ok()?;
        let l_f = operator_norm(&self.jac_theta(&x_bar, theta).ok()?);
        let l_j = self.alpha * self.design_scale;
        Some(ConstantsEstimate::analytic(rho, l_f, l_j, l_j, rho))
    }
}
