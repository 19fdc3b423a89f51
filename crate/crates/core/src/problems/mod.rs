//! Concrete fixed-point maps: toy affine maps, gradient descent on quadratics
//! and weighted ridge regression, damped Newton on weighted logistic
//! regression, and a primal-dual interior-point step for QPs.

use std::fmt;
use std::str::FromStr;

use crate::bounds::ConstantsEstimate;
use crate::error::{Error, Result};
use crate::fixed_point::AlgorithmMap;
use crate::linalg::{operator_norm, Matrix, Vector};

pub mod data;
pub mod instance;
pub mod logistic;
pub mod qp;
pub mod quadratic;
pub mod ridge;

pub use data::{random_orthonormal, random_spd, synthetic_logistic, synthetic_qp, synthetic_ridge};
pub use instance::{Instance, InstanceFile};
pub use logistic::{LineSearch, LogisticNewton, LossKind, NewtonStep};
pub use qp::{qp_ip_map, IpParams, IpStep, QpInstance, QpIpMap, QpSolution};
pub use quadratic::QuadraticInner;
pub use ridge::{ridge_map, ridge_truth_jacobian, RidgeMap, WeightedRidge};

/// Gradient-descent step size rule for a `µ`-strongly convex, `L`-smooth objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `α = 1/L`.
    #[default]
    InvL,
    /// `α = 2/(µ + L)`.
    TwoOverMuL,
}

impl StepRule {
    pub fn step(&self, mu: f64, l: f64) -> f64 {
        match self {
            StepRule::InvL => 1.0 / l,
            StepRule::TwoOverMuL => 2.0 / (mu + l),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepRule::InvL => "inv_L",
            StepRule::TwoOverMuL => "two_over_muL",
        }
    }
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_L" | "inv_l" | "1/L" => Ok(StepRule::InvL),
            "two_over_muL" | "two_over_mul" | "2/(mu+L)" => Ok(StepRule::TwoOverMuL),
            _ => Err(Error::InvalidArgument(format!(
                "unknown step rule {s:?} (expected inv_L or two_over_muL)"
            ))),
        }
    }
}

/// Contraction factor `max(|1 − αµ|, |1 − αL|)` of `I − αH` for `µI ⪯ H ⪯ LI`.
pub fn gd_contraction(alpha: f64, mu: f64, l: f64) -> f64 {
    (1.0 - alpha * mu).abs().max((1.0 - alpha * l).abs())
}

/// `F(x, θ) = θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantMap {
    n: usize,
}

impl ConstantMap {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl AlgorithmMap for ConstantMap {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.n)
    }

    fn apply(&self, _x: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(theta.clone())
    }

    fn jac_x(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::zeros(self.n, self.n))
    }

    fn jac_theta(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::identity(self.n))
    }

    fn analytic_constants(&self, _theta: &Vector) -> Option<ConstantsEstimate> {
        let l_f = if self.n == 0 { 0.0 } else { 1.0 };
        Some(ConstantsEstimate::analytic(0.0, l_f, 0.0, 0.0, 0.0))
    }
}

/// `F(x, θ) = Ax + Bθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    a: Matrix,
    b: Matrix,
}

impl AffineMap {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() || b.rows() != a.rows() {
            return Err(Error::DimensionMismatch(format!(
                "affine map needs square A and B with matching rows, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("affine map coefficients"));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

impl AlgorithmMap for AffineMap {
    fn dims(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(&self.a.matvec(x) + &self.b.matvec(theta))
    }

    fn jac_x(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(self.a.clone())
    }

    fn jac_theta(&self, _x: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(self.b.clone())
    }

    fn analytic_constants(&self, _theta: &Vector) -> Option<ConstantsEstimate> {
        let rho = operator_norm(&self.a);
        Some(ConstantsEstimate::analytic(rho, operator_norm(&self.b), 0.0, 0.0, rho))
    }
}
