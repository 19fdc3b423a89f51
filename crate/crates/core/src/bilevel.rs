//! Hypergradient descent on `min_θ g(x̄(θ))` where `x̄(θ)` is the fixed point of
//! an inner algorithm, using any estimator for the inner Jacobian.

use crate::bounds::{bound_bilevel, ConstantsEstimate};
use crate::error::{Error, Result};
use crate::estimators::{estimate, jac_implicit, Method};
use crate::fixed_point::{iterate_with, reference_fixed_point, AlgorithmMap, IterateOptions, IterationTrace};
use crate::linalg::{operator_norm, Matrix, Vector};

/// A θ-independent outer objective `g(x)`.
pub trait OuterObjective {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    /// Lipschitz constant of `∇g`, when known.
    fn grad_lipschitz(&self) -> Option<f64> {
        None
    }
}

/// `g(x) = ½‖x − target‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSquaredDistance {
    pub target: Vector,
}

impl OuterObjective for HalfSquaredDistance {
    fn value(&self, x: &Vector) -> f64 {
        0.5 * x.distance(&self.target).powi(2)
    }

    fn gradient(&self, x: &Vector) -> Vector {
        x - &self.target
    }

    fn grad_lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `g(x) = ½‖Bx − c‖²`, e.g. a validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub b: Matrix,
    pub c: Vector,
    lipschitz: f64,
}

impl LeastSquares {
    pub fn new(b: Matrix, c: Vector) -> Result<Self> {
        if b.rows() != c.dim() {
            return Err(Error::DimensionMismatch(format!(
                "validation matrix has {} rows, targets have {}",
                b.rows(),
                c.dim()
            )));
        }
        let nb = operator_norm(&b);
        Ok(Self {
            b,
            c,
            lipschitz: nb * nb,
        })
    }
}

impl OuterObjective for LeastSquares {
    fn value(&self, x: &Vector) -> f64 {
        0.5 * (&self.b.matvec(x) - &self.c).norm_sq()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        self.b.tr_matvec(&(&self.b.matvec(x) - &self.c))
    }

    fn grad_lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

#[derive(Debug, Clone)]
pub struct BilevelProblem<M, G> {
    pub inner: M,
    pub outer: G,
    /// Inner starting point used when not warm-starting.
    pub x0: Vector,
}

impl<M: AlgorithmMap, G: OuterObjective> BilevelProblem<M, G> {
    pub fn new(inner: M, outer: G, x0: Vector) -> Result<Self> {
        if x0.dim() != inner.dims().0 {
            return Err(Error::DimensionMismatch(format!(
                "inner start in R^{} for state dimension {}",
                x0.dim(),
                inner.dims().0
            )));
        }
        Ok(Self { inner, outer, x0 })
    }
}

/// One hypergradient evaluation.
#[derive(Debug, Clone)]
pub struct Hypergradient {
    pub gradient: Vector,
    pub jacobian: Matrix,
    pub trace: IterationTrace,
    /// `g(x_k)`.
    pub value: f64,
}

/// `Jᵀ∇g(x_k)` after `k` inner steps from `problem.x0`.
pub fn hypergradient<M: AlgorithmMap, G: OuterObjective>(
    problem: &BilevelProblem<M, G>,
    theta: &Vector,
    k: usize,
    method: Method,
) -> Result<Hypergradient> {
    hypergradient_from(problem, &problem.x0, theta, k, method)
}

pub fn hypergradient_from<M: AlgorithmMap, G: OuterObjective>(
    problem: &BilevelProblem<M, G>,
    x0: &Vector,
    theta: &Vector,
    k: usize,
    method: Method,
) -> Result<Hypergradient> {
    if k == 0 {
        return Err(Error::InvalidArgument("inner budget k must be at least 1".into()));
    }
    let trace = iterate_with(&problem.inner, x0, theta, &IterateOptions::fixed_steps(k))?;
    let jacobian = estimate(&problem.inner, &trace, method)?.matrix;
    let xk = trace.last();
    let gradient = jacobian.tr_matvec(&problem.outer.gradient(xk));
    Ok(Hypergradient {
        gradient,
        jacobian,
        value: problem.outer.value(xk),
        trace,
    })
}

/// Reference values at `θ`: `(∇(g∘x̄)(θ), x̄(θ))`, from a 1e-13 fixed point
/// and the implicit Jacobian there.
pub fn true_hypergradient<M: AlgorithmMap, G: OuterObjective>(
    problem: &BilevelProblem<M, G>,
    theta: &Vector,
) -> Result<(Vector, Vector)> {
    let x_bar = reference_fixed_point(&problem.inner, &problem.x0, theta)?;
    let j = jac_implicit(&problem.inner, &x_bar, theta)?.matrix;
    Ok((j.tr_matvec(&problem.outer.gradient(&x_bar)), x_bar))
}

/// Right-hand side of the one-step hypergradient error bound at `θ`, using the
/// local `l_g = ‖∇g(x̄)‖`.
pub fn hypergradient_bound<G: OuterObjective>(
    outer: &G,
    constants: &ConstantsEstimate,
    trace: &IterationTrace,
    x_bar: &Vector,
) -> Result<f64> {
    let l_grad = outer
        .grad_lipschitz()
        .ok_or_else(|| Error::InvalidArgument("outer objective has no gradient Lipschitz constant".into()))?;
    let l_g = outer.gradient(x_bar).norm();
    let dist_prev = trace.try_get(trace.k.saturating_sub(1))?.distance(x_bar);
    let dist_k = trace.last().distance(x_bar);
    bound_bilevel(constants, l_g, l_grad, dist_prev, dist_k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub alpha_outer: f64,
    pub outer_steps: usize,
    pub inner_budget: usize,
    pub method: Method,
    /// Start each inner solve from the previous `x_k`.
    pub warm_start: bool,
    /// Evaluate the reference gradient, its norm and the per-step bound at every step.
    pub track_truth: bool,
}

impl DescentOptions {
    pub fn new(alpha_outer: f64, outer_steps: usize, inner_budget: usize, method: Method) -> Self {
        Self {
            alpha_outer,
            outer_steps,
            inner_budget,
            method,
            warm_start: false,
            track_truth: false,
        }
    }

    pub fn with_truth(mut self) -> Self {
        self.track_truth = true;
        self
    }

    pub fn with_warm_start(mut self) -> Self {
        self.warm_start = true;
        self
    }
}

/// Outer trajectory. Per-step vectors have one entry per outer step `i`, all
/// evaluated at `θ_i`; `thetas` also holds the final `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradientRun {
    pub thetas: Vec<Vector>,
    pub hypergrads: Vec<Vector>,
    pub alpha_outer: f64,
    pub inner_budget: usize,
    pub estimator: Method,
    /// `g(x_k(θ_i))`.
    pub g_values: Vec<f64>,
    /// `‖hypergradient(θ_i)‖`.
    pub grad_norm_history: Vec<f64>,
    /// `g(x̄(θ_i))`.
    pub true_values: Vec<Option<f64>>,
    pub true_grad_norms: Vec<Option<f64>>,
    /// `‖∇(g∘x̄)(θ_i) − hypergradient(θ_i)‖`.
    pub hypergrad_errors: Vec<Option<f64>>,
    /// One-step error bound at `θ_i` (one-step estimator with analytic constants only).
    pub per_step_bounds: Vec<Option<f64>>,
}

impl HypergradientRun {
    pub const CSV_HEADER: &'static str =
        "outer_step,estimator,g_value,hypergrad_norm,true_grad_norm,per_step_bound,hypergrad_error";

    pub fn steps(&self) -> usize {
        self.hypergrads.len()
    }

    pub fn to_csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        (0..self.steps())
            .map(|i| {
                format!(
                    "{},{},{:e},{:e},{},{},{}",
                    i,
                    self.estimator,
                    self.g_values[i],
                    self.grad_norm_history[i],
                    opt(self.true_grad_norms[i]),
                    opt(self.per_step_bounds[i]),
                    opt(self.hypergrad_errors[i])
                )
            })
            .collect()
    }

    /// Largest per-step bound, if every step has one.
    pub fn max_per_step_bound(&self) -> Option<f64> {
        self.per_step_bounds
            .iter()
            .try_fold(0.0_f64, |acc, b| b.map(|b| acc.max(b)))
            .filter(|_| self.steps() > 0)
    }

    /// Smallest measured `‖∇(g∘x̄)(θ_i)‖²`, if tracked.
    pub fn min_true_grad_sq(&self) -> Option<f64> {
        self.true_grad_norms
            .iter()
            .try_fold(f64::INFINITY, |acc, n| n.map(|n| acc.min(n * n)))
            .filter(|_| self.steps() > 0)
    }
}

/// `θ_{i+1} = θ_i − α_outer · hypergradient(θ_i)`.
pub fn hypergradient_descent<M: AlgorithmMap, G: OuterObjective>(
    problem: &BilevelProblem<M, G>,
    theta0: &Vector,
    opts: &DescentOptions,
) -> Result<HypergradientRun> {
    if !(opts.alpha_outer > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "outer step must be positive, got {}",
            opts.alpha_outer
        )));
    }
    let mut run = HypergradientRun {
        thetas: vec![theta0.clone()],
        hypergrads: Vec::new(),
        alpha_outer: opts.alpha_outer,
        inner_budget: opts.inner_budget,
        estimator: opts.method,
        g_values: Vec::new(),
        grad_norm_history: Vec::new(),
        true_values: Vec::new(),
        true_grad_norms: Vec::new(),
        hypergrad_errors: Vec::new(),
        per_step_bounds: Vec::new(),
    };
    let mut theta = theta0.clone();
    let mut x_start = problem.x0.clone();
    for i in 0..opts.outer_steps {
        let hg = hypergradient_from(problem, &x_start, &theta, opts.inner_budget, opts.method)?;
        if opts.track_truth {
            let (truth, x_bar) = true_hypergradient(problem, &theta)?;
            run.true_values.push(Some(problem.outer.value(&x_bar)));
            run.true_grad_norms.push(Some(truth.norm()));
            run.hypergrad_errors.push(Some(truth.distance(&hg.gradient)));
            let bound = match (opts.method, problem.inner.analytic_constants(&theta)) {
                (Method::OneStep, Some(c)) => Some(hypergradient_bound(&problem.outer, &c, &hg.trace, &x_bar)?),
                _ => None,
            };
            run.per_step_bounds.push(bound);
        } else {
            run.true_values.push(None);
            run.true_grad_norms.push(None);
            run.hypergrad_errors.push(None);
            run.per_step_bounds.push(None);
        }
        if opts.warm_start {
            x_start = hg.trace.last().clone();
        }
        let mut next = theta.clone();
        next.axpy(-opts.alpha_outer, &hg.gradient);
        if !next.is_finite() {
            return Err(Error::NonFiniteIterate { step: i + 1 });
        }
        run.g_values.push(hg.value);
        run.grad_norm_history.push(hg.gradient.norm());
        run.hypergrads.push(hg.gradient);
        run.thetas.push(next.clone());
        theta = next;
    }
    Ok(run)
}

/// `ε` for the criticality certificate: the largest per-step bound of the
/// run divided by `L_outer`.
pub fn certificate_epsilon(run: &HypergradientRun, l_outer: f64) -> Result<f64> {
    run.max_per_step_bound()
        .map(|b| b / l_outer)
        .ok_or_else(|| Error::InvalidArgument("run has no per-step bounds".into()))
}

/// Upper bound on `min_i ‖∇(g∘x̄)(θ_i)‖²` over a run of `K` outer steps with
/// `α_outer = 1/L`: `L²ε² + 2L(g(x̄(θ_0)) − f*)/K`, where `ε` bounds
/// `‖θ_{i+1} − θ_i + ∇(g∘x̄)(θ_i)/L‖`.
pub fn criticality_certificate(run: &HypergradientRun, eps: f64, l_outer: f64, f_star_lower: f64) -> Result<f64> {
    if !(l_outer > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need L_outer > 0 and ε ≥ 0, got {l_outer} and {eps}"
        )));
    }
    let expected = 1.0 / l_outer;
    if (run.alpha_outer - expected).abs() > 1e-12 * expected {
        return Err(Error::StepSizeMismatch {
            alpha_outer: run.alpha_outer,
            expected,
        });
    }
    let k = run.steps();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "certificate needs at least one outer step".into(),
        ));
    }
    let g0 = run.true_values[0]
        .ok_or_else(|| Error::InvalidArgument("certificate needs g(x̄(θ_0)); run with truth tracking".into()))?;
    let delta = g0 - f_star_lower;
    Ok(l_outer * l_outer * eps * eps + 2.0 * l_outer * delta / k as f64)
}
