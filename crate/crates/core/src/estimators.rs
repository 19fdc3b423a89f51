//! Derivative estimators for fixed points `x̄(θ)` of an [`AlgorithmMap`].
//!
//! - unrolled (piggyback) differentiation through every step of the trace,
//! - implicit differentiation at the last iterate,
//! - one-step differentiation of the last step only, and its K-step variant,
//! - a central finite-difference oracle on the fixed-point solve.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fixed_point::{solve_fixed_point, AlgorithmMap, CostCounters, IterationTrace, REFERENCE_MAX_ITER};
use crate::linalg::{lu_solve, Matrix, Vector};

/// Central-difference step on θ for the finite-difference oracle.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Autodiff,
    Implicit,
    OneStep,
    KStep(usize),
    FiniteDifference,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Autodiff => "autodiff",
            Method::Implicit => "implicit",
            Method::OneStep => "onestep",
            Method::KStep(_) => "kstep",
            Method::FiniteDifference => "finite_difference",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::KStep(k) => write!(f, "kstep({k})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "autodiff" | "ad" | "unrolled" => Ok(Method::Autodiff),
            "implicit" | "id" => Ok(Method::Implicit),
            "onestep" | "one_step" | "os" => Ok(Method::OneStep),
            "finite_difference" | "fd" => Ok(Method::FiniteDifference),
            "kstep" => Ok(Method::KStep(0)),
            _ => {
                if let Some(k) = s.strip_prefix("kstep(").and_then(|r| r.strip_suffix(')')) {
                    let k = k
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad window in {s:?}")))?;
                    Ok(Method::KStep(k))
                } else {
                    Err(Error::InvalidArgument(format!("unknown estimator {s:?}")))
                }
            }
        }
    }
}

/// An n×m estimate of `J_θ x̄(θ)` with the work spent producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate {
    pub matrix: Matrix,
    pub method: Method,
    pub at_iteration: usize,
    pub costs: CostCounters,
}

impl JacobianEstimate {
    /// Rows `[start, start + len)`, e.g. the primal block of a primal-dual state.
    pub fn rows(&self, start: usize, len: usize) -> Matrix {
        self.matrix.block(start, 0, len, self.matrix.cols())
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("Jacobian estimate"))
    }
}

/// Forward accumulation `J_{i+1} = J_xF(x_i, θ) J_i + J_θF(x_i, θ)`.
///
/// Starting from `None` means `J_0 = 0`: the first step then needs only `J_θF`.
#[derive(Debug, Clone, Default)]
pub struct Piggyback {
    jac: Option<Matrix>,
    steps: usize,
    costs: CostCounters,
}

impl Piggyback {
    pub fn new(init: Option<Matrix>) -> Self {
        Self {
            jac: init,
            steps: 0,
            costs: CostCounters::default(),
        }
    }

    pub fn step<M: AlgorithmMap + ?Sized>(&mut self, map: &M, x: &Vector, theta: &Vector) -> Result<()> {
        let next = match self.jac.take() {
            None => {
                self.costs.jac_theta_evals += 1;
                map.jac_theta(x, theta)?
            }
            Some(j) => {
                let (a, b) = map.jacobians(x, theta)?;
                self.costs.jac_x_evals += 1;
                self.costs.jac_theta_evals += 1;
                let mut next = a.matmul(&j);
                next.add_assign(&b);
                next
            }
        };
        self.jac = Some(next);
        self.steps += 1;
        Ok(())
    }

    pub fn jacobian(&self) -> Option<&Matrix> {
        self.jac.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn costs(&self) -> CostCounters {
        self.costs
    }
}

fn check_trace<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<(usize, usize)> {
    let (n, m) = map.dims();
    if trace.theta.dim() != m || trace.last().dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "trace does not match map dims ({n}, {m})"
        )));
    }
    Ok((n, m))
}

fn run_window<M: AlgorithmMap + ?Sized>(
    map: &M,
    trace: &IterationTrace,
    start: usize,
    init: Option<Matrix>,
) -> Result<(Matrix, CostCounters)> {
    let mut acc = Piggyback::new(init);
    for i in start..trace.k {
        acc.step(map, trace.try_get(i)?, &trace.theta)?;
    }
    let (n, m) = map.dims();
    let jac = acc.jac.take().unwrap_or_else(|| Matrix::zeros(n, m));
    Ok((jac, acc.costs))
}

/// Unrolled differentiation through the full trace, from `J_0 = j0` (zero when `None`).
pub fn jac_autodiff<M: AlgorithmMap + ?Sized>(
    map: &M,
    trace: &IterationTrace,
    j0: Option<&Matrix>,
) -> Result<JacobianEstimate> {
    let (n, m) = check_trace(map, trace)?;
    if let Some(j) = j0 {
        if j.shape() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "j0 is {:?}, expected ({n}, {m})",
                j.shape()
            )));
        }
    }
    let start = Instant::now();
    let (matrix, mut costs) = run_window(map, trace, 0, j0.cloned())?;
    costs.wall_time = start.elapsed();
    check_finite(&matrix)?;
    Ok(JacobianEstimate {
        matrix,
        method: Method::Autodiff,
        at_iteration: trace.k,
        costs,
    })
}

/// `(I − J_xF(x, θ))⁻¹ J_θF(x, θ)`, using `x` as a surrogate for the fixed point.
pub fn jac_implicit<M: AlgorithmMap + ?Sized>(map: &M, x: &Vector, theta: &Vector) -> Result<JacobianEstimate> {
    let (n, m) = map.dims();
    if x.dim() != n || theta.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "map expects ({n}, {m}), got ({}, {})",
            x.dim(),
            theta.dim()
        )));
    }
    let start = Instant::now();
    let (a, b) = map.jacobians(x, theta)?;
    let mut lhs = a.scale(-1.0);
    lhs.add_diag(1.0);
    let matrix = lu_solve(&lhs, &b)?;
    check_finite(&matrix)?;
    Ok(JacobianEstimate {
        matrix,
        method: Method::Implicit,
        at_iteration: 0,
        costs: CostCounters {
            jac_x_evals: 1,
            jac_theta_evals: 1,
            linear_solves: 1,
            wall_time: start.elapsed(),
            ..Default::default()
        },
    })
}

/// Implicit estimator at the last iterate `x_k` of a trace.
pub fn jac_implicit_at<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<JacobianEstimate> {
    let mut est = jac_implicit(map, trace.last(), &trace.theta)?;
    est.at_iteration = trace.k;
    Ok(est)
}

/// `J_θF(x_{k−1}, θ)`: the derivative of the last step only.
pub fn jac_onestep<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<JacobianEstimate> {
    check_trace(map, trace)?;
    if trace.k == 0 {
        return Err(Error::EmptyTrace);
    }
    let start = Instant::now();
    let matrix = map.jac_theta(trace.try_get(trace.k - 1)?, &trace.theta)?;
    check_finite(&matrix)?;
    Ok(JacobianEstimate {
        matrix,
        method: Method::OneStep,
        at_iteration: trace.k,
        costs: CostCounters {
            jac_theta_evals: 1,
            wall_time: start.elapsed(),
            ..Default::default()
        },
    })
}

/// Piggyback recursion from zero over the last `window` steps of the trace.
///
/// Equals the one-step estimator of `F_θ^K` on the thinned trace.
pub fn jac_onestep_k<M: AlgorithmMap + ?Sized>(
    map: &M,
    trace: &IterationTrace,
    window: usize,
) -> Result<JacobianEstimate> {
    check_trace(map, trace)?;
    if trace.k == 0 {
        return Err(Error::EmptyTrace);
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window K must be at least 1".into()));
    }
    if window > trace.k {
        return Err(Error::WindowTooLarge { window, k: trace.k });
    }
    let start = Instant::now();
    let (matrix, mut costs) = run_window(map, trace, trace.k - window, None)?;
    costs.wall_time = start.elapsed();
    check_finite(&matrix)?;
    Ok(JacobianEstimate {
        matrix,
        method: Method::KStep(window),
        at_iteration: trace.k,
        costs,
    })
}

/// Central differences of `θ ↦ x̄(θ)` with step [`FD_STEP`]; every perturbed
/// fixed point is solved from `x0` to within `solver_tol` of `x̄`.
///
/// With an analytic `ρ` the step residual is driven to `solver_tol·(1 − ρ)/ρ`
/// (floored near rounding), since `‖x_{i+1} − x̄‖ ≤ ρ/(1 − ρ)·‖x_{i+1} − x_i‖`.
/// Otherwise the step residual itself is held to `solver_tol`.
pub fn jac_finite_difference<M: AlgorithmMap + ?Sized>(
    map: &M,
    x0: &Vector,
    theta: &Vector,
    solver_tol: f64,
) -> Result<JacobianEstimate> {
    let (n, m) = map.dims();
    if x0.dim() != n || theta.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "map expects ({n}, {m}), got ({}, {})",
            x0.dim(),
            theta.dim()
        )));
    }
    let start = Instant::now();
    let step_tol = match map.analytic_constants(theta) {
        Some(c) if c.rho > 0.0 && c.rho < 1.0 => {
            let floor = 64.0 * f64::EPSILON * x0.norm().max(1.0);
            (solver_tol * (1.0 - c.rho) / c.rho).clamp(floor.min(solver_tol), solver_tol)
        }
        _ => solver_tol,
    };
    let mut matrix = Matrix::zeros(n, m);
    let mut map_evals = 0;
    for j in 0..m {
        let mut plus = theta.clone();
        plus[j] += FD_STEP;
        let mut minus = theta.clone();
        minus[j] -= FD_STEP;
        let xp = solve_fixed_point(map, x0, &plus, step_tol, REFERENCE_MAX_ITER)?;
        let xm = solve_fixed_point(map, x0, &minus, step_tol, REFERENCE_MAX_ITER)?;
        let col = (&xp - &xm).scale(1.0 / (2.0 * FD_STEP));
        matrix.set_col(j, &col);
        map_evals += 2;
    }
    Ok(JacobianEstimate {
        matrix,
        method: Method::FiniteDifference,
        at_iteration: 0,
        costs: CostCounters {
            map_evals,
            wall_time: start.elapsed(),
            ..Default::default()
        },
    })
}

/// Dispatches to the estimator named by `method`. `FiniteDifference` solves
/// from `x_0` of the trace at the trace tolerance.
pub fn estimate<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace, method: Method) -> Result<JacobianEstimate> {
    match method {
        Method::Autodiff => jac_autodiff(map, trace, None),
        Method::Implicit => jac_implicit_at(map, trace),
        Method::OneStep => jac_onestep(map, trace),
        Method::KStep(k) => jac_onestep_k(map, trace, k.min(trace.k)),
        Method::FiniteDifference => {
            let x0 = trace.try_get(0)?;
            jac_finite_difference(map, x0, &trace.theta, trace.tol.max(1e-12))
        }
    }
}

/// Logs a warning when the last step of the trace left the smooth regime of the map.
pub fn check_regime<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<bool> {
    if trace.k == 0 {
        return Ok(true);
    }
    let smooth = map.is_smooth_at(trace.try_get(trace.k - 1)?, &trace.theta)?;
    if !smooth {
        log::warn!(
            "last step of the trace (k = {}) is outside the smooth regime; Jacobian estimates describe the damped map",
            trace.k
        );
    }
    Ok(smooth)
}

/// Largest deviation between analytic Jacobians and central differences of `apply`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianCheck {
    pub max_err_x: f64,
    pub max_err_theta: f64,
}

impl JacobianCheck {
    pub fn max_err(&self) -> f64 {
        self.max_err_x.max(self.max_err_theta)
    }
}

/// Compares `jac_x`/`jac_theta` with central differences of `apply` at step `h`.
pub fn check_jacobians<M: AlgorithmMap + ?Sized>(map: &M, x: &Vector, theta: &Vector, h: f64) -> Result<JacobianCheck> {
    let (jx, jt) = map.jacobians(x, theta)?;
    let mut max_err_x = 0.0_f64;
    for j in 0..x.dim() {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let col = (&map.apply(&xp, theta)? - &map.apply(&xm, theta)?).scale(0.5 / h);
        for i in 0..col.dim() {
            max_err_x = max_err_x.max((col[i] - jx.get(i, j)).abs());
        }
    }
    let mut max_err_theta = 0.0_f64;
    for j in 0..theta.dim() {
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let col = (&map.apply(x, &tp)? - &map.apply(x, &tm)?).scale(0.5 / h);
        for i in 0..col.dim() {
            max_err_theta = max_err_theta.max((col[i] - jt.get(i, j)).abs());
        }
    }
    Ok(JacobianCheck {
        max_err_x,
        max_err_theta,
    })
}
