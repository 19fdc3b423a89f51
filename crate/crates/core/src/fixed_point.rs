//! Parametric fixed-point maps `x ↦ F(x, θ)` and the forward recursion.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bounds::ConstantsEstimate;
use crate::error::{Error, Result};
use crate::linalg::{operator_norm, Matrix, Vector};

/// Stop tolerance used for reference fixed points in tests and oracles.
pub const REFERENCE_TOL: f64 = 1e-13;
/// Iteration cap used for reference fixed points.
pub const REFERENCE_MAX_ITER: usize = 100_000;

/// One iteration of an algorithm, `x_{k+1} = F(x_k, θ)`, with Jacobian access.
///
/// Implementations must be deterministic: identical inputs give bitwise-identical
/// outputs. Jacobians are supplied analytically by each map.
pub trait AlgorithmMap {
    /// `(n, m)`: state and parameter dimensions.
    fn dims(&self) -> (usize, usize);

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector>;

    /// `J_xF(x, θ)`, n×n.
    fn jac_x(&self, x: &Vector, theta: &Vector) -> Result<Matrix>;

    /// `J_θF(x, θ)`, n×m.
    fn jac_theta(&self, x: &Vector, theta: &Vector) -> Result<Matrix>;

    /// Both Jacobians at once. Maps that share work between them override this.
    fn jacobians(&self, x: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
        Ok((self.jac_x(x, theta)?, self.jac_theta(x, theta)?))
    }

    /// Closed-form constants for the error bounds at `θ`, when the map knows them.
    fn analytic_constants(&self, _theta: &Vector) -> Option<ConstantsEstimate> {
        None
    }

    /// False when the step taken at `x` leaves the smooth regime the Jacobians
    /// describe (e.g. a damped Newton step).
    fn is_smooth_at(&self, _x: &Vector, _theta: &Vector) -> Result<bool> {
        Ok(true)
    }
}

impl<M: AlgorithmMap + ?Sized> AlgorithmMap for &M {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        (**self).apply(x, theta)
    }
    fn jac_x(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        (**self).jac_x(x, theta)
    }
    fn jac_theta(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        (**self).jac_theta(x, theta)
    }
    fn jacobians(&self, x: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
        (**self).jacobians(x, theta)
    }
    fn analytic_constants(&self, theta: &Vector) -> Option<ConstantsEstimate> {
        (**self).analytic_constants(theta)
    }
    fn is_smooth_at(&self, x: &Vector, theta: &Vector) -> Result<bool> {
        (**self).is_smooth_at(x, theta)
    }
}

macro_rules! forward_map_impl {
    ($ptr:ident) => {
        impl<M: AlgorithmMap + ?Sized> AlgorithmMap for $ptr<M> {
            fn dims(&self) -> (usize, usize) {
                (**self).dims()
            }
            fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
                (**self).apply(x, theta)
            }
            fn jac_x(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
                (**self).jac_x(x, theta)
            }
            fn jac_theta(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
                (**self).jac_theta(x, theta)
            }
            fn jacobians(&self, x: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
                (**self).jacobians(x, theta)
            }
            fn analytic_constants(&self, theta: &Vector) -> Option<ConstantsEstimate> {
                (**self).analytic_constants(theta)
            }
            fn is_smooth_at(&self, x: &Vector, theta: &Vector) -> Result<bool> {
                (**self).is_smooth_at(x, theta)
            }
        }
    };
}

forward_map_impl!(Box);
forward_map_impl!(Arc);

/// Operation counts for one forward run or one estimator call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub map_evals: u64,
    pub jac_x_evals: u64,
    pub jac_theta_evals: u64,
    /// Estimator-level linear solves. Solves internal to a map are part of its cost.
    pub linear_solves: u64,
    pub wall_time: Duration,
}

impl CostCounters {
    pub fn merge(&mut self, other: &CostCounters) {
        self.map_evals += other.map_evals;
        self.jac_x_evals += other.jac_x_evals;
        self.jac_theta_evals += other.jac_theta_evals;
        self.linear_solves += other.linear_solves;
        self.wall_time += other.wall_time;
    }
}

/// How many iterates a trace keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceStorage {
    #[default]
    Full,
    /// Only the last `W + 1` iterates (`W` steps) are retained.
    Window(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateOptions {
    pub max_iter: usize,
    /// Stop once `‖x_{i+1} − x_i‖ ≤ tol`. Zero runs exactly `max_iter` steps
    /// unless an exact fixed point is hit.
    pub tol: f64,
    pub storage: TraceStorage,
}

impl IterateOptions {
    pub fn new(max_iter: usize, tol: f64) -> Self {
        Self {
            max_iter,
            tol,
            storage: TraceStorage::Full,
        }
    }

    /// Exactly `k` steps, no early stop.
    pub fn fixed_steps(k: usize) -> Self {
        Self {
            max_iter: k,
            tol: -1.0,
            storage: TraceStorage::Full,
        }
    }

    pub fn with_storage(mut self, storage: TraceStorage) -> Self {
        self.storage = storage;
        self
    }
}

/// The iterates `x_0 … x_k` of one forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    iterates: Vec<Vector>,
    /// Global index of `iterates[0]` (nonzero only in window mode).
    first_index: usize,
    pub step_residuals: Vec<f64>,
    pub local_contractions: Option<Vec<f64>>,
    pub theta: Vector,
    pub converged: bool,
    pub k: usize,
    pub tol: f64,
    pub costs: CostCounters,
}

impl IterationTrace {
    /// Iterate `x_i` by global index, if still stored.
    pub fn get(&self, i: usize) -> Option<&Vector> {
        i.checked_sub(self.first_index).and_then(|j| self.iterates.get(j))
    }

    pub fn try_get(&self, i: usize) -> Result<&Vector> {
        if i > self.k {
            return Err(Error::InvalidArgument(format!(
                "iterate {i} requested from a trace with k = {}",
                self.k
            )));
        }
        self.get(i).ok_or(Error::TraceTruncated {
            first: self.first_index,
            needed: i,
        })
    }

    /// `x_k`.
    pub fn last(&self) -> &Vector {
        self.iterates.last().expect("trace always holds x_0")
    }

    /// Stored iterates, oldest first.
    pub fn stored(&self) -> &[Vector] {
        &self.iterates
    }

    pub fn first_stored_index(&self) -> usize {
        self.first_index
    }

    pub fn is_full(&self) -> bool {
        self.first_index == 0
    }

    /// Copy of the first `k` steps (`x_0 … x_k`) of a full trace.
    pub fn prefix(&self, k: usize) -> Result<IterationTrace> {
        if !self.is_full() {
            return Err(Error::TraceTruncated {
                first: self.first_index,
                needed: 0,
            });
        }
        if k > self.k {
            return Err(Error::InvalidArgument(format!(
                "prefix {k} longer than trace k = {}",
                self.k
            )));
        }
        Ok(IterationTrace {
            iterates: self.iterates[..=k].to_vec(),
            first_index: 0,
            step_residuals: self.step_residuals[..k].to_vec(),
            local_contractions: self.local_contractions.as_ref().map(|c| c[..=k].to_vec()),
            theta: self.theta.clone(),
            converged: k == self.k && self.converged,
            k,
            tol: self.tol,
            costs: self.costs,
        })
    }

    /// Fills `local_contractions` with `‖J_xF(x_i, θ)‖op` for every stored iterate.
    pub fn compute_local_contractions<M: AlgorithmMap + ?Sized>(&mut self, map: &M) -> Result<()> {
        self.local_contractions = Some(local_contractions(map, self)?);
        Ok(())
    }
}

fn check_dims<M: AlgorithmMap + ?Sized>(map: &M, x: &Vector, theta: &Vector) -> Result<()> {
    let (n, m) = map.dims();
    if x.dim() != n || theta.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "map expects (n, m) = ({n}, {m}), got x in R^{} and θ in R^{}",
            x.dim(),
            theta.dim()
        )));
    }
    Ok(())
}

/// Runs `x_{i+1} = F(x_i, θ)` until the step residual drops to `tol` or
/// `max_iter` steps have been taken, keeping the full trace.
pub fn iterate<M: AlgorithmMap + ?Sized>(
    map: &M,
    x0: &Vector,
    theta: &Vector,
    max_iter: usize,
    tol: f64,
) -> Result<IterationTrace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    iterate_with(map, x0, theta, &IterateOptions::new(max_iter, tol))
}

pub fn iterate_with<M: AlgorithmMap + ?Sized>(
    map: &M,
    x0: &Vector,
    theta: &Vector,
    opts: &IterateOptions,
) -> Result<IterationTrace> {
    iterate_monitored(map, x0, theta, opts, |_, _| Ok(false))
}

/// Like [`iterate_with`], with `monitor(i, x_i)` called after every step.
/// Returning `Ok(true)` stops the run as converged; an error aborts it.
pub fn iterate_monitored<M: AlgorithmMap + ?Sized>(
    map: &M,
    x0: &Vector,
    theta: &Vector,
    opts: &IterateOptions,
    mut monitor: impl FnMut(usize, &Vector) -> Result<bool>,
) -> Result<IterationTrace> {
    check_dims(map, x0, theta)?;
    if opts.tol.is_nan() {
        return Err(Error::InvalidArgument("tolerance is NaN".into()));
    }
    if !x0.is_finite() {
        return Err(Error::NonFiniteIterate { step: 0 });
    }
    let start = Instant::now();
    let mut costs = CostCounters::default();
    let mut iterates = vec![x0.clone()];
    let mut first_index = 0;
    let mut step_residuals = Vec::new();
    let mut converged = false;
    let mut k = 0;
    let mut x = x0.clone();
    while k < opts.max_iter {
        let next = map.apply(&x, theta)?;
        costs.map_evals += 1;
        k += 1;
        if !next.is_finite() {
            return Err(Error::NonFiniteIterate { step: k });
        }
        let r = next.distance(&x);
        step_residuals.push(r);
        iterates.push(next.clone());
        if let TraceStorage::Window(w) = opts.storage {
            if iterates.len() > w + 1 {
                iterates.remove(0);
                first_index += 1;
            }
        }
        let stop = monitor(k, &next)?;
        x = next;
        if stop || r <= opts.tol {
            converged = true;
            break;
        }
    }
    costs.wall_time = start.elapsed();
    Ok(IterationTrace {
        iterates,
        first_index,
        step_residuals,
        local_contractions: None,
        theta: theta.clone(),
        converged,
        k,
        tol: opts.tol,
        costs,
    })
}

/// High-accuracy fixed point `x̄(θ)` (tolerance 1e-13, at most 100 000 steps).
pub fn reference_fixed_point<M: AlgorithmMap + ?Sized>(map: &M, x0: &Vector, theta: &Vector) -> Result<Vector> {
    solve_fixed_point(map, x0, theta, REFERENCE_TOL, REFERENCE_MAX_ITER)
}

/// Iterates to `tol` and returns the last iterate, failing if not converged.
pub fn solve_fixed_point<M: AlgorithmMap + ?Sized>(
    map: &M,
    x0: &Vector,
    theta: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<Vector> {
    let trace = iterate_with(
        map,
        x0,
        theta,
        &IterateOptions::new(max_iter, tol).with_storage(TraceStorage::Window(0)),
    )?;
    if !trace.converged {
        return Err(Error::NoConvergence {
            iterations: trace.k,
            residual: trace.step_residuals.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(trace.last().clone())
}

/// `‖J_xF(x_i, θ)‖op` at every stored iterate.
pub fn local_contractions<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<Vec<f64>> {
    trace
        .stored()
        .iter()
        .enumerate()
        .map(|(j, x)| {
            if !x.is_finite() {
                return Err(Error::NonFiniteIterate {
                    step: trace.first_index + j,
                });
            }
            Ok(operator_norm(&map.jac_x(x, &trace.theta)?))
        })
        .collect()
}

/// Empirical contraction factor: max of `‖J_xF(x_i, θ)‖op` over the trace.
///
/// This can underestimate the uniform constant over the whole domain; it is
/// exact for maps with constant `J_xF`.
pub fn estimate_contraction<M: AlgorithmMap + ?Sized>(map: &M, trace: &IterationTrace) -> Result<f64> {
    let c = match &trace.local_contractions {
        Some(c) => c.clone(),
        None => local_contractions(map, trace)?,
    };
    Ok(c.into_iter().fold(0.0, f64::max))
}

/// `F_θ^K`: K applications of the inner map, differentiated by the chain rule.
#[derive(Debug, Clone)]
pub struct ComposeK<M> {
    inner: M,
    k: usize,
}

pub fn compose_k<M: AlgorithmMap>(map: M, k: usize) -> Result<ComposeK<M>> {
    if k == 0 {
        return Err(Error::InvalidArgument("composition count K must be at least 1".into()));
    }
    Ok(ComposeK { inner: map, k })
}

impl<M: AlgorithmMap> ComposeK<M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn steps(&self) -> usize {
        self.k
    }
}

impl<M: AlgorithmMap> AlgorithmMap for ComposeK<M> {
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn apply(&self, x: &Vector, theta: &Vector) -> Result<Vector> {
        let mut x = self.inner.apply(x, theta)?;
        for _ in 1..self.k {
            x = self.inner.apply(&x, theta)?;
        }
        Ok(x)
    }

    fn jac_x(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(x, theta)?.0)
    }

    fn jac_theta(&self, x: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(x, theta)?.1)
    }

    fn jacobians(&self, x: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
        let (mut jx, mut jt) = self.inner.jacobians(x, theta)?;
        let mut xi = x.clone();
        for _ in 1..self.k {
            xi = self.inner.apply(&xi, theta)?;
            let (a, b) = self.inner.jacobians(&xi, theta)?;
            jx = a.matmul(&jx);
            let mut next = a.matmul(&jt);
            next.add_assign(&b);
            jt = next;
        }
        Ok((jx, jt))
    }

    fn is_smooth_at(&self, x: &Vector, theta: &Vector) -> Result<bool> {
        let mut xi = x.clone();
        for _ in 0..self.k {
            if !self.inner.is_smooth_at(&xi, theta)? {
                return Ok(false);
            }
            xi = self.inner.apply(&xi, theta)?;
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{AffineMap, ConstantMap};

    fn half_plus_theta() -> AffineMap {
        AffineMap::new(Matrix::from_diag(&[0.5]), Matrix::identity(1)).unwrap()
    }

    #[test]
    fn constant_map_converges_in_one_step() {
        let theta = Vector::from(vec![1.5, -2.0]);
        let trace = iterate(&ConstantMap::new(2), &Vector::zeros(2), &theta, 50, 1e-12).unwrap();
        // x_1 = θ, x_2 = θ with zero step
        assert_eq!(trace.get(1).unwrap(), &theta);
        assert!(trace.converged);
        assert_eq!(trace.k, 2);
        assert_eq!(trace.step_residuals[1], 0.0);
    }

    #[test]
    fn geometric_recursion_matches_closed_form() {
        let map = half_plus_theta();
        let trace = iterate_with(
            &map,
            &Vector::zeros(1),
            &Vector::from(vec![1.0]),
            &IterateOptions::fixed_steps(30),
        )
        .unwrap();
        for k in 0..=30 {
            let expected = 2.0 * (1.0 - 0.5f64.powi(k as i32));
            assert!((trace.get(k).unwrap()[0] - expected).abs() < 1e-15);
        }
        assert_eq!(trace.stored().len(), trace.k + 1);
        assert_eq!(trace.step_residuals.len(), trace.k);
    }

    #[test]
    fn converged_trace_ends_below_tolerance() {
        let map = half_plus_theta();
        let trace = iterate(&map, &Vector::zeros(1), &Vector::from(vec![1.0]), 200, 1e-10).unwrap();
        assert!(trace.converged);
        assert!(*trace.step_residuals.last().unwrap() <= 1e-10);
        assert_eq!(trace.costs.map_evals, trace.k as u64);
    }

    #[test]
    fn window_storage_keeps_last_iterates() {
        let map = half_plus_theta();
        let opts = IterateOptions::fixed_steps(20).with_storage(TraceStorage::Window(3));
        let trace = iterate_with(&map, &Vector::zeros(1), &Vector::from(vec![1.0]), &opts).unwrap();
        assert_eq!(trace.stored().len(), 4);
        assert_eq!(trace.first_stored_index(), 17);
        assert!(trace.get(16).is_none());
        assert!(matches!(trace.try_get(2), Err(Error::TraceTruncated { .. })));
        let full = iterate_with(
            &map,
            &Vector::zeros(1),
            &Vector::from(vec![1.0]),
            &IterateOptions::fixed_steps(20),
        )
        .unwrap();
        assert_eq!(trace.last(), full.last());
    }

    #[test]
    fn non_finite_iterate_is_an_error() {
        // x ↦ 2x + θ diverges to infinity
        let map = AffineMap::new(Matrix::from_diag(&[1e300]), Matrix::identity(1)).unwrap();
        let err = iterate(&map, &Vector::from(vec![1.0]), &Vector::from(vec![0.0]), 10, 1e-8).unwrap_err();
        assert_eq!(err, Error::NonFiniteIterate { step: 2 });
    }

    #[test]
    fn rejects_bad_dims_and_tolerance() {
        let map = half_plus_theta();
        assert!(matches!(
            iterate(&map, &Vector::zeros(2), &Vector::zeros(1), 5, 1e-8),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            iterate(&map, &Vector::zeros(1), &Vector::zeros(1), 5, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn affine_contraction_is_operator_norm() {
        let a = Matrix::from_rows(&[&[0.3, 0.2], &[-0.1, 0.4]]);
        let map = AffineMap::new(a.clone(), Matrix::identity(2)).unwrap();
        let trace = iterate(&map, &Vector::zeros(2), &Vector::from(vec![1.0, 1.0]), 100, 1e-12).unwrap();
        assert_eq!(estimate_contraction(&map, &trace).unwrap(), operator_norm(&a));
    }

    #[test]
    fn compose_one_is_identity_wrapper() {
        let a = Matrix::from_rows(&[&[0.3, 0.2], &[-0.1, 0.4]]);
        let b = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let map = AffineMap::new(a, b).unwrap();
        let c = compose_k(&map, 1).unwrap();
        let x = Vector::from(vec![0.7, -0.2]);
        let t = Vector::from(vec![0.5]);
        assert_eq!(c.apply(&x, &t).unwrap(), map.apply(&x, &t).unwrap());
        assert_eq!(c.jac_x(&x, &t).unwrap(), map.jac_x(&x, &t).unwrap());
        assert_eq!(c.jac_theta(&x, &t).unwrap(), map.jac_theta(&x, &t).unwrap());
        assert!(compose_k(&map, 0).is_err());
    }

    #[test]
    fn compose_two_affine_closed_form() {
        let a = Matrix::from_rows(&[&[0.3, 0.2], &[-0.1, 0.4]]);
        let b = Matrix::from_rows(&[&[1.0, 0.0, 2.0], &[0.5, -1.0, 0.0]]);
        let map = AffineMap::new(a.clone(), b.clone()).unwrap();
        let c = compose_k(&map, 2).unwrap();
        let x = Vector::from(vec![0.7, -0.2]);
        let t = Vector::from(vec![0.5, 0.1, -0.3]);
        let jx = c.jac_x(&x, &t).unwrap();
        let jt = c.jac_theta(&x, &t).unwrap();
        assert!(jx.max_abs_diff(&a.matmul(&a)) < 1e-15);
        assert!(jt.max_abs_diff(&a.matmul(&b).add(&b)) < 1e-15);
    }

    #[test]
    fn compose_then_iterate_matches_plain_iteration() {
        let a = Matrix::from_rows(&[&[0.3, 0.2], &[-0.1, 0.4]]);
        let map = AffineMap::new(a, Matrix::identity(2)).unwrap();
        let theta = Vector::from(vec![1.0, -1.0]);
        let x0 = Vector::from(vec![3.0, 2.0]);
        let c = compose_k(&map, 3).unwrap();
        let coarse = iterate_with(&c, &x0, &theta, &IterateOptions::fixed_steps(5)).unwrap();
        let fine = iterate_with(&map, &x0, &theta, &IterateOptions::fixed_steps(15)).unwrap();
        for j in 0..=5 {
            assert!(coarse.get(j).unwrap().distance(fine.get(3 * j).unwrap()) <= 1e-12);
        }
    }
}
