//! Damped Newton on sample-weighted, ℓ2-regularised logistic regression
//! `f(x, θ) = Σᵢ θᵢ ℓ(yᵢ⟨aᵢ, x⟩) + λ‖x₋₁‖²`, where `x₋₁` omits the
//! intercept coordinate `x₀`.

use crate::error::{Error, Result};
use crate::fixed_point::AlgorithmMap;
use crate::linalg::{Cholesky, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `ℓ(t) = log(1 + e⁻ᵗ)`.
    #[default]
    Logistic,
    /// `ℓ(t) = ½(1 − t)²`; the objective is quadratic and Newton is exact.
    Squared,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LossKind {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::Squared => 0.5 * (1.0 - t) * (1.0 - t),
        }
    }

    /// `(ℓ', ℓ'', ℓ''')` at `t`.
    pub fn derivatives(&self, t: f64) -> (f64, f64, f64) {
        match self {
            LossKind::Logistic => {
                let s = sigmoid(t);
                let sm = sigmoid(-t);
                let d2 = s * sm;
                (-sm, d2, d2 * (sm - s))
            }
            LossKind::Squared => (t - 1.0, 1.0, 0.0),
        }
    }
}

/// Armijo backtracking `f(x − td) ≤ f(x) − c·t·gᵀd`, halving `t` from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub shrink: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            shrink: 0.5,
            armijo: 1e-4,
            max_halvings: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticNewton {
    /// `N × n`; column 0 is the intercept feature.
    pub design: Matrix,
    /// Labels in `{−1, +1}`.
    pub labels: Vector,
    pub lambda: f64,
    pub loss: LossKind,
    pub line_search: LineSearch,
}

/// One damped Newton step `x⁺ = x − t·d` with `d = H⁻¹g`.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub next: Vector,
    pub direction: Vector,
    pub step: f64,
    pub halvings: usize,
    pub gradient: Vector,
    hessian: Cholesky,
    margins: Vec<f64>,
}

impl LogisticNewton {
    pub fn new(design: Matrix, labels: Vector, lambda: f64) -> Result<Self> {
        if design.rows() != labels.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} labels",
                design.rows(),
                labels.dim()
            )));
        }
        if design.cols() == 0 {
            return Err(Error::InvalidArgument(
                "design needs at least the intercept column".into(),
            ));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "penalty must be positive, got {lambda}"
            )));
        }
        if !design.is_finite() {
            return Err(Error::NonFinite("logistic design"));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument("labels must be ±1".into()));
        }
        Ok(Self {
            design,
            labels,
            lambda,
            loss: LossKind::Logistic,
            line_search: LineSearch::default(),
        })
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.design.rows()
    }

    pub fn n_features(&self) -> usize {
        self.design.cols()
    }

    /// Number of data entries `(n + 1)N` (design plus labels).
    pub fn parameter_count(&self) -> usize {
        (self.n_features() + 1) * self.n_samples()
    }

    fn check_theta(&self, theta: &Vector) -> Result<()> {
        if theta.dim() != self.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "{} sample weights for {} samples",
                theta.dim(),
                self.n_samples()
            )));
        }
        if theta.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("sample weights must be positive".into()));
        }
        Ok(())
    }

    /// `yᵢ⟨aᵢ, x⟩`.
    fn margins(&self, x: &Vector) -> Vec<f64> {
        let ax = self.design.matvec(x);
        (0..self.n_samples()).map(|i| self.labels[i] * ax[i]).collect()
    }

    fn penalty(&self, x: &Vector) -> f64 {
        self.lambda * x.iter().skip(1).map(|v| v * v).sum::<f64>()
    }

    pub fn objective(&self, x: &Vector, theta: &Vector) -> f64 {
        let m = self.margins(x);
        m.iter()
            .zip(theta.iter())
            .map(|(&t, &w)| w * self.loss.value(t))
            .sum::<f64>()
            + self.penalty(x)
    }

    pub fn gradient(&self, x: &Vector, theta: &Vector) -> Vector {
        self.gradient_at(x, theta, &self.margins(x))
    }

    fn gradient_at(&self, x: &Vector, theta: &Vector, margins: &[f64]) -> Vector {
        let coef = Vector::from_fn(self.n_samples(), |i| {
            theta[i] * self.loss.derivatives(margins[i]).0 * self.labels[i]
        });
        let mut g = self.design.tr_matvec(&coef);
        for j in 1..g.dim() {
            g[j] += 2.0 * self.lambda * x[j];
        }
        g
    }

    /// `Σᵢ cᵢ aᵢaᵢᵀ`.
    fn weighted_gram(&self, c: &[f64]) -> Matrix {
        let a = &self.design;
        let scaled = Matrix::from_fn(a.rows(), a.cols(), |i, j| c[i] * a.get(i, j));
        a.tr_matmul(&scaled)
    }

    fn hessian_at(&self, theta: &Vector, margins: &[f64]) -> Matrix {
        let c: Vec<f64> = (0..self.n_samples())
            .map(|i| theta[i] * self.loss.derivatives(margins[i]).1)
            .collect();
        let mut h = self.weighted_gram(&c);
        for j in 1..h.rows() {
            h.set(j, j, h.get(j, j) + 2.0 * self.lambda);
        }
        h
    }

    pub fn hessian(&self, x: &Vector, theta: &Vector) -> Matrix {
        self.hessian_at(theta, &self.margins(x))
    }

    /// Newton direction and Armijo step at `x`.
    pub fn newton_step(&self, x: &Vector, theta: &Vector) -> Result<NewtonStep> {
        self.check_theta(theta)?;
        if x.dim() != self.n_features() {
            return Err(Error::DimensionMismatch(format!(
                "x in R^{} for {} features",
                x.dim(),
                self.n_features()
            )));
        }
        let margins = self.margins(x);
        let gradient = self.gradient_at(x, theta, &margins);
        let hessian = Cholesky::factor(&self.hessian_at(theta, &margins))?;
        let direction = hessian.solve_vec(&gradient)?;
        let f0 = self.objective(x, theta);
        let decrement = gradient.dot(&direction);
        // rounding slack so that steps near the optimum are not rejected
        let slack = 4.0 * f64::EPSILON * f0.abs();
        let ls = self.line_search;
        let mut step = 1.0;
        let mut halvings = 0;
        let next = loop {
            let mut cand = x.clone();
            cand.axpy(-step, &direction);
            if self.objective(&cand, theta) <= f0 - ls.armijo * step * decrement + slack {
                break cand;
            }
            if halvings == ls.max_halvings {
                return Err(Error::LineSearchFailed { halvings });
            }
            step *= ls.shrink;
            halvings += 1;
        };
        Ok(NewtonStep {
            next,
            direction,
            step,
            halvings,
            gradient,
            hessian,
            margins,
        })
    }

    fn step_jacobians(&self, st: &NewtonStep, theta: &Vector) -> Result<(Matrix, Matrix)> {
        let n_s = self.n_samples();
        let a = &self.design;
        let ad = a.matvec(&st.direction);
        let mut c3 = vec![0.0; n_s];
        let mut w = vec![0.0; n_s];
        for i in 0..n_s {
            let (d1, d2, d3) = self.loss.derivatives(st.margins[i]);
            c3[i] = theta[i] * d3 * self.labels[i] * ad[i];
            w[i] = d1 * self.labels[i] - d2 * ad[i];
        }
        let t = st.step;
        // J_x = (1 − t)I + t H⁻¹M
        let m = self.weighted_gram(&c3);
        let mut jx = st.hessian.solve(&m)?.scale(t);
        jx.add_diag(1.0 - t);
        // column i of J_θ: −t H⁻¹aᵢ(ℓ'yᵢ − ℓ''⟨aᵢ, d⟩)
        let rhs = Matrix::from_fn(a.cols(), n_s, |j, i| -t * a.get(i, j) * w[i]);
        let jt = st.hessian.solve(&rhs)?;
        Ok((jx, jt))
    }
}

impl AlgorithmMap for LogisticNewton {
    fn dims(&self) -> (usize, usize) {
        (self.n_features(), self.n_samples())
    }

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(self.newton_step(x, theta)?.next)
    }

    fn jac_x(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(x, theta)?.0)
    }

    fn jac_theta(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(x, theta)?.1)
    }

    fn jacobians(&self, x: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
        let st = self.newton_step(x, theta)?;
        self.step_jacobians(&st, theta)
    }

    /// The map is smooth in `x` where the unit step is accepted.
    fn is_smooth_at(&self, x: &Vector, theta: &Vector) -> Result<bool> {
        Ok(self.newton_step(x, theta)?.halvings == 0)
    }
}
