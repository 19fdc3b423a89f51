//! Experiment harness behind the `fpdiff` command line: accuracy curves,
//! bound sweeps, timing trends and hypergradient runs, emitted as CSV.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bilevel::{
    certificate_epsilon, criticality_certificate, hypergradient_descent, BilevelProblem, DescentOptions,
    HalfSquaredDistance, HypergradientRun, LeastSquares,
};
use crate::bounds::{
    bound_implicit, bound_onestep, bound_onestep_quadratic, estimate_constants, perturbation_identity, BoundKind,
    ConstantsEstimate, ConstantsMode, SAMPLED_SAFETY, SUPERLINEAR_TOL,
};
use crate::error::{Error, Result};
use crate::estimators::{
    check_jacobians, jac_autodiff, jac_finite_difference, jac_implicit, jac_onestep, jac_onestep_k, Method, Piggyback,
};
use crate::fixed_point::{
    iterate_with, reference_fixed_point, AlgorithmMap, CostCounters, IterateOptions, IterationTrace, TraceStorage,
};
use crate::linalg::{operator_norm, Matrix, Vector};
use crate::problems::data::{gaussian_matrix, gaussian_vector};
use crate::problems::{
    qp_ip_map, ridge_map, ridge_truth_jacobian, synthetic_logistic, synthetic_qp, synthetic_ridge, Instance,
    InstanceFile, QuadraticInner, RidgeMap, StepRule,
};

/// Ridge penalty of the synthetic ridge instances.
pub const RIDGE_LAMBDA: f64 = 0.5;
/// Penalty of the synthetic logistic instances.
pub const LOGISTIC_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    NewtonLogistic,
    IpQp,
    RidgeGd,
    QuadraticSynthetic,
    BilevelRidge,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::NewtonLogistic => "newton_logistic",
            Experiment::IpQp => "ip_qp",
            Experiment::RidgeGd => "ridge_gd",
            Experiment::QuadraticSynthetic => "quadratic_synthetic",
            Experiment::BilevelRidge => "bilevel_ridge",
        }
    }

    /// Number of integers in one size tuple.
    pub fn size_arity(&self) -> usize {
        match self {
            Experiment::NewtonLogistic | Experiment::RidgeGd | Experiment::BilevelRidge => 2,
            Experiment::IpQp => 3,
            Experiment::QuadraticSynthetic => 1,
        }
    }

    fn default_sizes(&self) -> Vec<Vec<usize>> {
        match self {
            Experiment::NewtonLogistic => vec![vec![40, 5]],
            Experiment::IpQp => vec![vec![10, 3, 8]],
            Experiment::RidgeGd => vec![vec![50, 8]],
            Experiment::QuadraticSynthetic => vec![vec![10]],
            Experiment::BilevelRidge => vec![vec![50, 8]],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "newton_logistic" => Experiment::NewtonLogistic,
            "ip_qp" => Experiment::IpQp,
            "ridge_gd" => Experiment::RidgeGd,
            "quadratic_synthetic" => Experiment::QuadraticSynthetic,
            "bilevel_ridge" => Experiment::BilevelRidge,
            _ => return Err(Error::InvalidArgument(format!("unknown experiment {s:?}"))),
        })
    }
}

/// Parses `50x8,100x10` into size tuples.
pub fn parse_sizes(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|tuple| {
            tuple
                .trim()
                .split('x')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad size entry {v:?} in {tuple:?}")))
                })
                .collect()
        })
        .collect()
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub sizes: Vec<Vec<usize>>,
    pub seed: u64,
    pub estimators: Vec<Method>,
    /// Inner iterations (largest k of the accuracy grid).
    pub k: usize,
    /// Truncation window for `kstep`; `None` picks `⌈L/µ⌉` where available.
    pub window: Option<usize>,
    pub cond: f64,
    pub alpha: StepRule,
    pub output: Option<PathBuf>,
    pub reps: usize,
    pub outer_steps: usize,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        let k = match experiment {
            Experiment::NewtonLogistic => 10,
            Experiment::IpQp => 40,
            Experiment::RidgeGd | Experiment::QuadraticSynthetic => 2000,
            Experiment::BilevelRidge => 100,
        };
        Self {
            experiment,
            sizes: experiment.default_sizes(),
            seed: 0,
            estimators: vec![Method::Autodiff, Method::Implicit, Method::OneStep],
            k,
            window: None,
            cond: 100.0,
            alpha: StepRule::InvL,
            output: None,
            reps: 5,
            outer_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::InvalidArgument("no sizes given".into()));
        }
        let arity = self.experiment.size_arity();
        for s in &self.sizes {
            if s.len() != arity || s.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "{} sizes need {arity} positive entries, got {s:?}",
                    self.experiment
                )));
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators given".into()));
        }
        if !(self.cond > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "condition target must exceed 1, got {}",
                self.cond
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.window == Some(0) {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        Ok(())
    }

    fn rng(&self, size_index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1_000_003 * size_index as u64))
    }
}

/// CSV with a schema comment line and a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl CsvTable {
    pub fn new(kind: &str, header: &str) -> Self {
        Self {
            schema: format!("fpdiff.{kind}.v1"),
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("#schema={}\n{}\n", self.schema, self.header);
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    /// Writes to `path`, or to stdout when `None`.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => fs::write(p, self.render())
                .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", p.display()))),
            None => {
                let mut out = std::io::stdout().lock();
                match out.write_all(self.render().as_bytes()).and_then(|_| out.flush()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                        Err(Error::InvalidArgument(format!("cannot write to stdout: {e}")))
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// An instance ready for the accuracy and timing harnesses.
pub struct Setup {
    pub label: String,
    pub map: Box<dyn AlgorithmMap>,
    pub theta: Vector,
    pub x0: Vector,
    /// Reference fixed point (full state).
    pub x_bar: Vector,
    /// Leading rows of the state compared against the truth (the primal block).
    pub primal: usize,
    pub param_count: usize,
    /// `⌈L/µ⌉` for gradient-descent problems.
    pub default_window: Option<usize>,
}

impl Setup {
    pub fn primal_error(&self, x: &Vector) -> f64 {
        x.segment(0, self.primal).distance(&self.x_bar.segment(0, self.primal))
    }
}

/// Builds the instance for size tuple `size_index` of the config, with the
/// ground-truth `∂x̄/∂θ` on the primal rows.
pub fn build_setup(config: &ExperimentConfig, size_index: usize) -> Result<(Setup, Matrix)> {
    let size = &config.sizes[size_index];
    let mut rng = config.rng(size_index);
    let label = size.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
    match config.experiment {
        Experiment::RidgeGd | Experiment::BilevelRidge => {
            let (n_samples, n) = (size[0], size[1]);
            let prob = synthetic_ridge(&mut rng, n_samples, n, config.cond, RIDGE_LAMBDA)?;
            let theta = Vector::from_elem(n_samples, 1.0);
            let (mu, l) = prob.curvature(&theta)?;
            let x_bar = prob.solve(&theta)?;
            let truth = ridge_truth_jacobian(&prob, &theta)?;
            let map = ridge_map(prob, config.alpha, &theta)?;
            Ok((
                Setup {
                    label,
                    map: Box::new(map),
                    theta,
                    x0: Vector::zeros(n),
                    x_bar,
                    primal: n,
                    param_count: (n + 1) * n_samples,
                    default_window: Some((l / mu).ceil() as usize),
                },
                truth,
            ))
        }
        Experiment::QuadraticSynthetic => {
            let n = size[0];
            let prob = QuadraticInner::random(&mut rng, n, config.cond, config.alpha)?;
            let theta = gaussian_vector(&mut rng, n);
            let x_bar = prob.fixed_point(&theta)?;
            let truth = prob.truth_jacobian()?;
            let window = (prob.l() / prob.mu()).ceil() as usize;
            Ok((
                Setup {
                    label,
                    map: Box::new(prob),
                    theta,
                    x0: Vector::zeros(n),
                    x_bar,
                    primal: n,
                    param_count: n * (n + 1) / 2 + n,
                    default_window: Some(window),
                },
                truth,
            ))
        }
        Experiment::NewtonLogistic => {
            let (n_samples, n) = (size[0], size[1]);
            let prob = synthetic_logistic(&mut rng, n_samples, n, LOGISTIC_LAMBDA)?;
            let theta = Vector::from_elem(n_samples, 1.0);
            let x0 = Vector::zeros(n);
            let x_bar = reference_fixed_point(&prob, &x0, &theta)?;
            let truth = jac_finite_difference(&prob, &x_bar, &theta, 1e-13)?.matrix;
            let param_count = prob.parameter_count();
            Ok((
                Setup {
                    label,
                    map: Box::new(prob),
                    theta,
                    x0,
                    x_bar,
                    primal: n,
                    param_count,
                    default_window: None,
                },
                truth,
            ))
        }
        Experiment::IpQp => {
            let (n, m_eq, p) = (size[0], size[1], size[2]);
            let (inst, theta) = synthetic_qp(&mut rng, n, m_eq, p);
            let param_count = inst.parameter_count();
            let map = qp_ip_map(inst);
            let x0 = map.initial_state();
            let sol = map.solve(&theta, 1e-13, 500)?;
            let truth = map.kkt_implicit_jacobian(&sol.state)?;
            Ok((
                Setup {
                    label,
                    map: Box::new(map),
                    theta,
                    x0,
                    x_bar: sol.state,
                    primal: n,
                    param_count,
                    default_window: None,
                },
                truth,
            ))
        }
    }
}

/// Builds a setup from an instance file. `theta` defaults to ones (sample
/// weights) or, for QPs, must be given in the file.
pub fn setup_from_instance(file: &InstanceFile) -> Result<(Setup, Matrix)> {
    let need_theta = |m: usize| -> Result<Vector> {
        match &file.theta {
            Some(t) if t.dim() == m => Ok(t.clone()),
            Some(t) => Err(Error::DimensionMismatch(format!(
                "theta has {} entries, expected {m}",
                t.dim()
            ))),
            None => Ok(Vector::from_elem(m, 1.0)),
        }
    };
    let label = file.instance.kind().to_string();
    let (setup, truth) = match &file.instance {
        Instance::Quadratic { q, alpha } => {
            let prob = QuadraticInner::new(q.clone(), *alpha)?;
            let n = q.rows();
            let theta = need_theta(n)?;
            let x_bar = prob.fixed_point(&theta)?;
            let truth = prob.truth_jacobian()?;
            let window = (prob.l() / prob.mu()).ceil() as usize;
            (
                Setup {
                    label,
                    map: Box::new(prob),
                    theta,
                    x0: Vector::zeros(n),
                    x_bar,
                    primal: n,
                    param_count: n * (n + 1) / 2 + n,
                    default_window: Some(window),
                },
                truth,
            )
        }
        Instance::Ridge { problem, alpha } => {
            let theta = need_theta(problem.n_samples())?;
            let (mu, l) = problem.curvature(&theta)?;
            let n = problem.n_features();
            let x_bar = problem.solve(&theta)?;
            let truth = ridge_truth_jacobian(problem, &theta)?;
            let param_count = (n + 1) * problem.n_samples();
            (
                Setup {
                    label,
                    map: Box::new(RidgeMap::with_alpha(problem.clone(), *alpha)?),
                    theta,
                    x0: Vector::zeros(n),
                    x_bar,
                    primal: n,
                    param_count,
                    default_window: Some((l / mu).ceil() as usize),
                },
                truth,
            )
        }
        Instance::Logistic(prob) => {
            let theta = need_theta(prob.n_samples())?;
            let n = prob.n_features();
            let x0 = Vector::zeros(n);
            let x_bar = reference_fixed_point(prob, &x0, &theta)?;
            let truth = jac_finite_difference(prob, &x_bar, &theta, 1e-13)?.matrix;
            (
                Setup {
                    label,
                    param_count: prob.parameter_count(),
                    map: Box::new(prob.clone()),
                    theta,
                    x0,
                    x_bar,
                    primal: n,
                    default_window: None,
                },
                truth,
            )
        }
        Instance::Qp(inst) => {
            let theta = file
                .theta
                .clone()
                .ok_or_else(|| Error::InvalidArgument("QP instance needs a theta vector".into()))?;
            let map = qp_ip_map(inst.clone());
            let x0 = map.initial_state();
            let sol = map.solve(&theta, 1e-13, 500)?;
            let truth = map.kkt_implicit_jacobian(&sol.state)?;
            (
                Setup {
                    label,
                    param_count: inst.parameter_count(),
                    map: Box::new(map),
                    theta,
                    x0,
                    x_bar: sol.state,
                    primal: inst.n(),
                    default_window: None,
                },
                truth,
            )
        }
    };
    let x0 = match &file.x0 {
        Some(x) if x.dim() == setup.x0.dim() => x.clone(),
        Some(x) => {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, expected {}",
                x.dim(),
                setup.x0.dim()
            )))
        }
        None => setup.x0.clone(),
    };
    Ok((Setup { x0, ..setup }, truth))
}

/// `1, 2, 4, …` up to `k_max`, always including `k_max`.
pub fn geometric_grid(k_max: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut k = 1;
    while k < k_max {
        grid.push(k);
        k *= 2;
    }
    if k_max > 0 {
        grid.push(k_max);
    }
    grid
}

/// Resolves a bare `kstep` (window 0) to the configured or default window.
fn resolve_methods(config: &ExperimentConfig, default_window: Option<usize>) -> Vec<Method> {
    let window = config.window.or(default_window).unwrap_or(1);
    config
        .estimators
        .iter()
        .map(|m| match m {
            Method::KStep(0) => Method::KStep(window),
            other => *other,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRecord {
    pub size: String,
    pub k: usize,
    pub estimator: Method,
    /// `‖x_k − x̄‖²` on the primal block.
    pub iterate_err_sq: f64,
    /// `‖J − J_truth‖²_F`.
    pub jac_err_sq: f64,
    /// `‖J − J_truth‖op`.
    pub jac_err_op: f64,
    pub bound_kind: Option<BoundKind>,
    pub bound: Option<f64>,
}

impl AccuracyRecord {
    pub const CSV_HEADER: &'static str = "size,k,estimator,iterate_err_sq,jac_err_sq,jac_err_op,bound_kind,bound";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{},{}",
            self.size,
            self.k,
            self.estimator,
            self.iterate_err_sq,
            self.jac_err_sq,
            self.jac_err_op,
            self.bound_kind.map(|b| b.label()).unwrap_or(""),
            opt_cell(self.bound)
        )
    }
}

pub fn records_to_csv(records: &[AccuracyRecord]) -> CsvTable {
    let mut t = CsvTable::new("accuracy", AccuracyRecord::CSV_HEADER);
    t.rows = records.iter().map(AccuracyRecord::to_csv_row).collect();
    t
}

fn constants_for(setup: &Setup, trace: &IterationTrace) -> Option<ConstantsEstimate> {
    if let Some(c) = setup.map.analytic_constants(&setup.theta) {
        return Some(c);
    }
    estimate_constants(&setup.map, trace, ConstantsMode::TraceSampled)
        .ok()
        .map(|c| c.inflated(SAMPLED_SAFETY))
}

fn onestep_bound(c: &ConstantsEstimate, dist_prev: f64) -> Option<(BoundKind, f64)> {
    if c.provenance == crate::bounds::Provenance::TraceSampled && c.rho_final <= SUPERLINEAR_TOL {
        return bound_onestep_quadratic(c, dist_prev)
            .ok()
            .map(|b| (BoundKind::OneStepQuadratic, b));
    }
    bound_onestep(c, dist_prev).ok().map(|b| (BoundKind::OneStepLinear, b))
}

/// Accuracy curves for one instance over the geometric grid `1, 2, 4, … ≤ k`.
pub fn accuracy_for_setup(config: &ExperimentConfig, setup: &Setup, truth: &Matrix) -> Result<Vec<AccuracyRecord>> {
    let methods = resolve_methods(config, setup.default_window);
    let trace = iterate_with(
        &setup.map,
        &setup.x0,
        &setup.theta,
        &IterateOptions::fixed_steps(config.k),
    )?;
    let grid = geometric_grid(trace.k);
    let constants = constants_for(setup, &trace);
    let p = setup.primal;
    let err = |j: &Matrix| -> (f64, f64) {
        let d = j.block(0, 0, p, j.cols()).sub(truth);
        (d.frobenius_norm().powi(2), operator_norm(&d))
    };

    // unrolled Jacobians at the grid points, accumulated once
    let mut autodiff = Vec::new();
    if methods.contains(&Method::Autodiff) {
        let mut acc = Piggyback::new(None);
        let mut next = 0;
        for i in 0..trace.k {
            acc.step(&setup.map, trace.try_get(i)?, &setup.theta)?;
            if next < grid.len() && grid[next] == i + 1 {
                autodiff.push(acc.jacobian().expect("at least one step").clone());
                next += 1;
            }
        }
    }

    let mut out = Vec::new();
    for (gi, &k) in grid.iter().enumerate() {
        let prefix = trace.prefix(k)?;
        let xk = trace.try_get(k)?;
        let x_prev = trace.try_get(k - 1)?;
        let iterate_err_sq = setup.primal_error(xk).powi(2);
        let dist_k = xk.distance(&setup.x_bar);
        let dist_prev = x_prev.distance(&setup.x_bar);
        for &method in &methods {
            let (jac, bound) = match method {
                Method::Autodiff => (autodiff[gi].clone(), None),
                Method::Implicit => {
                    let b = constants
                        .as_ref()
                        .and_then(|c| bound_implicit(c, dist_k).ok())
                        .map(|b| (BoundKind::ImplicitLinear, b));
                    (jac_implicit(&setup.map, xk, &setup.theta)?.matrix, b)
                }
                Method::OneStep => {
                    let b = constants.as_ref().and_then(|c| onestep_bound(c, dist_prev));
                    (jac_onestep(&setup.map, &prefix)?.matrix, b)
                }
                Method::KStep(w) => (jac_onestep_k(&setup.map, &prefix, w.min(k))?.matrix, None),
                Method::FiniteDifference => {
                    log::warn!("finite differences serve as the truth oracle; skipped as an estimator");
                    continue;
                }
            };
            let (jac_err_sq, jac_err_op) = err(&jac);
            out.push(AccuracyRecord {
                size: setup.label.clone(),
                k,
                estimator: method,
                iterate_err_sq,
                jac_err_sq,
                jac_err_op,
                bound_kind: bound.map(|b| b.0),
                bound: bound.map(|b| b.1),
            });
        }
    }
    Ok(out)
}

pub fn run_accuracy(config: &ExperimentConfig) -> Result<Vec<AccuracyRecord>> {
    config.validate()?;
    if config.experiment == Experiment::BilevelRidge {
        return Err(Error::InvalidArgument(
            "use the bilevel subcommand for bilevel_ridge".into(),
        ));
    }
    let mut out = Vec::new();
    for i in 0..config.sizes.len() {
        let (setup, truth) = build_setup(config, i)?;
        out.extend(accuracy_for_setup(config, &setup, &truth)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SolveOnly,
    SolvePlusAutodiff,
    SolvePlusImplicit,
    SolvePlusOneStep,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::SolveOnly,
        Phase::SolvePlusAutodiff,
        Phase::SolvePlusImplicit,
        Phase::SolvePlusOneStep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::SolveOnly => "solve_only",
            Phase::SolvePlusAutodiff => "solve_plus_autodiff",
            Phase::SolvePlusImplicit => "solve_plus_implicit",
            Phase::SolvePlusOneStep => "solve_plus_onestep",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub experiment: Experiment,
    pub size: String,
    pub param_count: usize,
    pub phase: Phase,
    /// Median over the repetitions.
    pub wall_time: Duration,
    pub reps: usize,
    /// Forward run plus estimator, from the last repetition.
    pub counters: CostCounters,
}

impl TimingRecord {
    pub const CSV_HEADER: &'static str =
        "experiment,size,param_count,phase,median_seconds,reps,map_evals,jac_x_evals,jac_theta_evals,linear_solves";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e},{},{},{},{},{}",
            self.experiment,
            self.size,
            self.param_count,
            self.phase.name(),
            self.wall_time.as_secs_f64(),
            self.reps,
            self.counters.map_evals,
            self.counters.jac_x_evals,
            self.counters.jac_theta_evals,
            self.counters.linear_solves
        )
    }
}

pub fn timing_to_csv(records: &[TimingRecord]) -> CsvTable {
    let mut t = CsvTable::new("timing", TimingRecord::CSV_HEADER);
    t.rows = records.iter().map(TimingRecord::to_csv_row).collect();
    t
}

/// Median of `reps` timed runs after one discarded warmup run.
pub fn median_time(reps: usize, mut f: impl FnMut() -> Result<CostCounters>) -> Result<(Duration, CostCounters)> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    let mut last = CostCounters::default();
    for _ in 0..reps {
        let start = Instant::now();
        last = f()?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok((times[times.len() / 2], last))
}

fn run_phase(setup: &Setup, k: usize, phase: Phase) -> Result<CostCounters> {
    let storage = match phase {
        Phase::SolvePlusAutodiff => TraceStorage::Full,
        _ => TraceStorage::Window(1),
    };
    let opts = IterateOptions::fixed_steps(k).with_storage(storage);
    let trace = iterate_with(&setup.map, &setup.x0, &setup.theta, &opts)?;
    let mut costs = trace.costs;
    let est = match phase {
        Phase::SolveOnly => return Ok(costs),
        Phase::SolvePlusAutodiff => jac_autodiff(&setup.map, &trace, None)?,
        Phase::SolvePlusImplicit => jac_implicit(&setup.map, trace.last(), &setup.theta)?,
        Phase::SolvePlusOneStep => jac_onestep(&setup.map, &trace)?,
    };
    std::hint::black_box(&est.matrix);
    costs.merge(&est.costs);
    Ok(costs)
}

/// Median wall time of each phase over the size sweep. Phases of one
/// instance are timed back to back on the calling thread.
pub fn run_timing(config: &ExperimentConfig) -> Result<Vec<TimingRecord>> {
    config.validate()?;
    if config.reps < 5 {
        return Err(Error::InvalidArgument(format!(
            "timing needs at least 5 repetitions, got {}",
            config.reps
        )));
    }
    if !matches!(config.experiment, Experiment::NewtonLogistic | Experiment::IpQp) {
        return Err(Error::InvalidArgument(format!(
            "timing runs support newton_logistic and ip_qp, not {}",
            config.experiment
        )));
    }
    let mut out = Vec::new();
    for i in 0..config.sizes.len() {
        let setup = timing_setup(config, i)?;
        for phase in Phase::ALL {
            let (wall_time, counters) = median_time(config.reps, || run_phase(&setup, config.k, phase))?;
            out.push(TimingRecord {
                experiment: config.experiment,
                size: setup.label.clone(),
                param_count: setup.param_count,
                phase,
                wall_time,
                reps: config.reps,
                counters,
            });
        }
    }
    Ok(out)
}

/// Instance for timing: no reference solution or truth is needed.
fn timing_setup(config: &ExperimentConfig, size_index: usize) -> Result<Setup> {
    let size = &config.sizes[size_index];
    let mut rng = config.rng(size_index);
    let label = size.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
    match config.experiment {
        Experiment::NewtonLogistic => {
            let (n_samples, n) = (size[0], size[1]);
            let prob = synthetic_logistic(&mut rng, n_samples, n, LOGISTIC_LAMBDA)?;
            let param_count = prob.parameter_count();
            Ok(Setup {
                label,
                map: Box::new(prob),
                theta: Vector::from_elem(n_samples, 1.0),
                x0: Vector::zeros(n),
                x_bar: Vector::zeros(n),
                primal: n,
                param_count,
                default_window: None,
            })
        }
        Experiment::IpQp => {
            let (n, m_eq, p) = (size[0], size[1], size[2]);
            let (inst, theta) = synthetic_qp(&mut rng, n, m_eq, p);
            let param_count = inst.parameter_count();
            let map = qp_ip_map(inst);
            let x0 = map.initial_state();
            Ok(Setup {
                label,
                x_bar: x0.clone(),
                map: Box::new(map),
                theta,
                x0,
                primal: n,
                param_count,
                default_window: None,
            })
        }
        _ => unreachable!("checked by run_timing"),
    }
}

/// Overheads `phase − solve_only` of the largest size, in seconds.
pub fn overheads(records: &[TimingRecord]) -> Option<(f64, f64, f64)> {
    let largest = records.iter().map(|r| r.param_count).max()?;
    let get = |p: Phase| {
        records
            .iter()
            .find(|r| r.param_count == largest && r.phase == p)
            .map(|r| r.wall_time.as_secs_f64())
    };
    let base = get(Phase::SolveOnly)?;
    Some((
        get(Phase::SolvePlusAutodiff)? - base,
        get(Phase::SolvePlusImplicit)? - base,
        get(Phase::SolvePlusOneStep)? - base,
    ))
}

/// Criticality certificate compared with the measured minimum squared gradient norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateRecord {
    pub outer_steps: usize,
    pub eps: f64,
    pub l_outer: f64,
    pub certificate: f64,
    pub min_grad_sq: f64,
    pub satisfied: bool,
}

impl CertificateRecord {
    pub const CSV_HEADER: &'static str = "outer_steps,eps,L_outer,certificate,min_grad_sq,satisfied";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.outer_steps, self.eps, self.l_outer, self.certificate, self.min_grad_sq, self.satisfied
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelReport {
    pub runs: Vec<HypergradientRun>,
    pub certificates: Vec<CertificateRecord>,
}

impl BilevelReport {
    pub fn runs_csv(&self) -> CsvTable {
        let mut t = CsvTable::new("hypergradient", HypergradientRun::CSV_HEADER);
        for r in &self.runs {
            t.rows.extend(r.to_csv_rows());
        }
        t
    }

    pub fn certificates_csv(&self) -> CsvTable {
        let mut t = CsvTable::new("certificate", CertificateRecord::CSV_HEADER);
        t.rows = self.certificates.iter().map(CertificateRecord::to_csv_row).collect();
        t
    }
}

/// Quadratic bilevel toy: inner `F(x, θ) = x − α(Qx − θ)` with `λmin(Q) = 1`
/// and outer `g(x) = ½‖x − x*‖²`. The composed objective has Hessian `Q⁻²`,
/// so `L_outer = 1` and `inf g∘x̄ = 0` (attained at `θ = Qx*`).
pub struct QuadraticToy {
    pub problem: BilevelProblem<QuadraticInner, HalfSquaredDistance>,
    pub l_outer: f64,
    pub f_star: f64,
}

pub fn quadratic_toy<R: Rng + ?Sized>(rng: &mut R, n: usize, cond: f64, rule: StepRule) -> Result<QuadraticToy> {
    let inner = QuadraticInner::random(rng, n, cond, rule)?;
    let l_outer = 1.0 / (inner.mu() * inner.mu());
    let target = gaussian_vector(rng, n);
    let problem = BilevelProblem::new(inner, HalfSquaredDistance { target }, Vector::zeros(n))?;
    Ok(QuadraticToy {
        problem,
        l_outer,
        f_star: 0.0,
    })
}

/// Runs hypergradient descent on the toy with `α_outer = 1/L_outer` and
/// checks the criticality certificate with `ε` from the per-step bounds.
pub fn toy_certificate(
    toy: &QuadraticToy,
    theta0: &Vector,
    outer_steps: usize,
    inner_budget: usize,
) -> Result<(HypergradientRun, CertificateRecord)> {
    let opts = DescentOptions::new(1.0 / toy.l_outer, outer_steps, inner_budget, Method::OneStep).with_truth();
    let run = hypergradient_descent(&toy.problem, theta0, &opts)?;
    let eps = certificate_epsilon(&run, toy.l_outer)?;
    let certificate = criticality_certificate(&run, eps, toy.l_outer, toy.f_star)?;
    let min_grad_sq = run.min_true_grad_sq().expect("truth tracked");
    Ok((
        run,
        CertificateRecord {
            outer_steps,
            eps,
            l_outer: toy.l_outer,
            certificate,
            min_grad_sq,
            satisfied: min_grad_sq <= certificate,
        },
    ))
}

/// Bilevel ridge: sample weights `θ` of a ridge problem are tuned to reduce a
/// validation least-squares loss. The quadratic toy with its certificate is
/// run under `quadratic_synthetic`.
pub fn run_bilevel(config: &ExperimentConfig) -> Result<BilevelReport> {
    config.validate()?;
    let mut report = BilevelReport {
        runs: Vec::new(),
        certificates: Vec::new(),
    };
    match config.experiment {
        Experiment::BilevelRidge => {
            for i in 0..config.sizes.len() {
                let (n_samples, n) = (config.sizes[i][0], config.sizes[i][1]);
                let mut rng = config.rng(i);
                let train = synthetic_ridge(&mut rng, n_samples, n, config.cond, RIDGE_LAMBDA)?;
                let b = gaussian_matrix(&mut rng, n_samples, n);
                let x_val = gaussian_vector(&mut rng, n);
                let c = &b.matvec(&x_val) + &gaussian_vector(&mut rng, n_samples).scale(0.1);
                let theta0 = Vector::from_elem(n_samples, 1.0);
                let truth = ridge_truth_jacobian(&train, &theta0)?;
                let outer = LeastSquares::new(b, c)?;
                let scale = operator_norm(&outer.b) * operator_norm(&truth);
                let alpha_outer = 0.5 / (scale * scale);
                let map = ridge_map(train, config.alpha, &theta0)?;
                let problem = BilevelProblem::new(map, outer, Vector::zeros(n))?;
                for &method in &resolve_methods(config, None) {
                    let opts = DescentOptions::new(alpha_outer, config.outer_steps, config.k, method).with_truth();
                    report.runs.push(hypergradient_descent(&problem, &theta0, &opts)?);
                }
            }
        }
        Experiment::QuadraticSynthetic => {
            for i in 0..config.sizes.len() {
                let mut rng = config.rng(i);
                let toy = quadratic_toy(&mut rng, config.sizes[i][0], config.cond, config.alpha)?;
                let theta0 = gaussian_vector(&mut rng, config.sizes[i][0]);
                if config.outer_steps == 0 {
                    continue;
                }
                let (run, cert) = toy_certificate(&toy, &theta0, config.outer_steps, config.k)?;
                report.runs.push(run);
                report.certificates.push(cert);
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "bilevel runs support bilevel_ridge and quadratic_synthetic, not {other}"
            )))
        }
    }
    Ok(report)
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq)]
pub struct SelftestResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Random `A` with `‖A‖op ≤ max_norm`.
pub fn random_contraction<R: Rng + ?Sized>(rng: &mut R, n: usize, max_norm: f64) -> Matrix {
    let a = gaussian_matrix(rng, n, n);
    let target = max_norm * rng.gen_range(0.0..1.0);
    let norm = operator_norm(&a);
    if norm == 0.0 {
        a
    } else {
        a.scale(target / norm)
    }
}

/// Perturbation identity over `trials` random `(A, B, B̃)` with `‖A‖op ≤ 0.9`.
/// Returns the largest identity error and the smallest slack of the norm estimate.
pub fn perturbation_suite(seed: u64, trials: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_identity = 0.0_f64;
    let mut min_slack = f64::INFINITY;
    for _ in 0..trials {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=6);
        let a = random_contraction(&mut rng, n, 0.9);
        let b = gaussian_matrix(&mut rng, n, m);
        let eps: f64 = rng.gen_range(0.0..1.0);
        let b_tilde = b.add(&gaussian_matrix(&mut rng, n, m).scale(eps));
        let chk = perturbation_identity(&a, &b, &b_tilde)?;
        worst_identity = worst_identity.max(chk.identity_err);
        min_slack = min_slack.min(chk.estimate - chk.lhs_norm);
    }
    Ok((worst_identity, min_slack))
}

/// Perturbation identity suite plus finite-difference Jacobian consistency of
/// every concrete map at random points.
pub fn selftest(seed: u64) -> Vec<SelftestResult> {
    let mut out = Vec::new();
    match perturbation_suite(seed, 100) {
        Ok((id, slack)) => out.push(SelftestResult {
            name: "perturbation_identity".into(),
            passed: id <= 1e-10 && slack >= -1e-9,
            detail: format!("max identity error {id:e}, min estimate slack {slack:e}"),
        }),
        Err(e) => out.push(SelftestResult {
            name: "perturbation_identity".into(),
            passed: false,
            detail: e.to_string(),
        }),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let maps: Vec<(&str, Result<Box<dyn AlgorithmMap>>)> = vec![
        (
            "quadratic",
            QuadraticInner::random(&mut rng, 6, 20.0, StepRule::InvL).map(|m| Box::new(m) as Box<dyn AlgorithmMap>),
        ),
        (
            "ridge",
            synthetic_ridge(&mut rng, 20, 5, 20.0, RIDGE_LAMBDA)
                .and_then(|p| ridge_map(p, StepRule::TwoOverMuL, &Vector::from_elem(20, 1.0)))
                .map(|m| Box::new(m) as Box<dyn AlgorithmMap>),
        ),
        (
            "logistic_newton",
            synthetic_logistic(&mut rng, 30, 4, LOGISTIC_LAMBDA).map(|m| Box::new(m) as Box<dyn AlgorithmMap>),
        ),
    ];
    for (name, map) in maps {
        let res = map.and_then(|map| {
            fd_consistency(&*map, &mut rng, |rng, n| {
                Vector::from_fn(n, |_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            })
        });
        out.push(fd_result(name, res));
    }
    let (inst, theta) = synthetic_qp(&mut rng, 5, 2, 4);
    let qp = qp_ip_map(inst);
    let res = (|| {
        let mut worst = 0.0_f64;
        for _ in 0..10 {
            let mut w = Vector::from_fn(qp.state_dim(), |_| rng.gen_range(-1.0..1.0));
            let (n, p, m) = (5, 4, 2);
            for j in 0..p {
                w[n + j] = rng.gen_range(0.5..2.0);
                w[n + p + m + j] = rng.gen_range(0.5..2.0);
            }
            let scale = 1.0 + qp.jacobians(&w, &theta)?.0.max_abs();
            worst = worst.max(check_jacobians(&qp, &w, &theta, 1e-6)?.max_err() / scale);
        }
        Ok(worst)
    })();
    out.push(fd_result("interior_point_qp", res));
    out
}

fn fd_consistency<R: Rng>(
    map: &dyn AlgorithmMap,
    rng: &mut R,
    mut sample: impl FnMut(&mut R, usize) -> Vector,
) -> Result<f64> {
    let (n, m) = map.dims();
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let x = sample(rng, n);
        let theta = Vector::from_fn(m, |_| rng.gen_range(0.5..1.5));
        worst = worst.max(check_jacobians(map, &x, &theta, 1e-6)?.max_err());
    }
    Ok(worst)
}

fn fd_result(name: &str, res: Result<f64>) -> SelftestResult {
    match res {
        Ok(err) => SelftestResult {
            name: format!("fd_consistency_{name}"),
            passed: err <= 1e-6,
            detail: format!("max deviation {err:e}"),
        },
        Err(e) => SelftestResult {
            name: format!("fd_consistency_{name}"),
            passed: false,
            detail: e.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_geometric_and_ends_at_k() {
        assert_eq!(geometric_grid(1), vec![1]);
        assert_eq!(geometric_grid(10), vec![1, 2, 4, 8, 10]);
        assert_eq!(geometric_grid(8), vec![1, 2, 4, 8]);
    }

    #[test]
    fn size_and_estimator_parsing() {
        assert_eq!(parse_sizes("50x8,100x10").unwrap(), vec![vec![50, 8], vec![100, 10]]);
        assert!(parse_sizes("50xa").unwrap_err().is_config());
        assert_eq!(
            parse_estimators("autodiff,onestep,kstep").unwrap(),
            vec![Method::Autodiff, Method::OneStep, Method::KStep(0)]
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::new(Experiment::RidgeGd);
        assert!(c.validate().is_ok());
        c.sizes = vec![vec![10]];
        assert!(c.validate().unwrap_err().is_config());
        let mut c = ExperimentConfig::new(Experiment::RidgeGd);
        c.cond = 1.0;
        assert!(c.validate().is_err());
        c.cond = 10.0;
        c.estimators.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_outer_steps_give_header_only_csv() {
        let mut c = ExperimentConfig::new(Experiment::BilevelRidge);
        c.sizes = vec![vec![12, 3]];
        c.outer_steps = 0;
        let csv = run_bilevel(&c).unwrap().runs_csv();
        assert!(csv.rows.is_empty());
        assert_eq!(
            csv.render(),
            format!("#schema=fpdiff.hypergradient.v1\n{}\n", HypergradientRun::CSV_HEADER)
        );
    }

    #[test]
    fn quadratic_onestep_plateau_is_closed_form() {
        let mut c = ExperimentConfig::new(Experiment::QuadraticSynthetic);
        c.k = 64;
        c.estimators = vec![Method::OneStep];
        let recs = run_accuracy(&c).unwrap();
        let (setup, truth) = build_setup(&c, 0).unwrap();
        let alpha = setup.map.jac_theta(&setup.x0, &setup.theta).unwrap().get(0, 0);
        let diag = Matrix::from_diag(&[alpha; 10]);
        let expected = diag.sub(&truth).frobenius_norm().powi(2);
        for r in recs {
            assert!(
                (r.jac_err_sq - expected).abs() <= 1e-8,
                "{} vs {expected}",
                r.jac_err_sq
            );
        }
    }

    #[test]
    fn accuracy_is_reproducible() {
        let mut c = ExperimentConfig::new(Experiment::RidgeGd);
        c.k = 50;
        c.estimators = vec![Method::Autodiff, Method::OneStep, Method::KStep(0)];
        let a = records_to_csv(&run_accuracy(&c).unwrap()).render();
        let b = records_to_csv(&run_accuracy(&c).unwrap()).render();
        assert_eq!(a, b);
    }
}
