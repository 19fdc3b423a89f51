//! Error-bound right-hand sides for the estimators and their comparison with
//! measured errors.
//!
//! All norms are spectral norms. Bounds computed from analytic constants are
//! theorems and can be asserted; bounds computed from trace-sampled constants
//! are reported only, since sampled Lipschitz moduli can underestimate the
//! global ones.

use std::fmt;

use crate::error::{Error, Result};
use crate::fixed_point::{AlgorithmMap, IterationTrace};
use crate::linalg::{lu_solve, operator_norm, Matrix};

/// Slack added on the bound side when deciding `satisfied`.
pub const BOUND_SLACK: f64 = 1e-8;
/// Safety factor applied to trace-sampled Lipschitz moduli.
pub const SAMPLED_SAFETY: f64 = 2.0;
/// Largest final-iterate `‖J_xF‖op` accepted as a vanishing Jacobian.
pub const SUPERLINEAR_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    TraceSampled,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Analytic => "analytic",
            Provenance::TraceSampled => "trace_sampled",
        })
    }
}

/// Constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsEstimate {
    /// Contraction factor, bound on `‖J_xF‖op`.
    pub rho: f64,
    /// Bound on `‖J_θF‖op`.
    pub l_f: f64,
    /// Lipschitz modulus of `x ↦ J_θF(x, θ)`.
    pub l_j_theta: f64,
    /// Lipschitz modulus of `x ↦ [J_xF J_θF](x, θ)`.
    pub l_j_joint: f64,
    /// `‖J_xF‖op` at the last iterate (zero for vanishing-Jacobian maps at the fixed point).
    pub rho_final: f64,
    pub provenance: Provenance,
}

impl ConstantsEstimate {
    pub fn analytic(rho: f64, l_f: f64, l_j_theta: f64, l_j_joint: f64, rho_final: f64) -> Self {
        Self {
            rho,
            l_f,
            l_j_theta,
            l_j_joint,
            rho_final,
            provenance: Provenance::Analytic,
        }
    }

    /// Lipschitz moduli multiplied by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self {
            l_j_theta: self.l_j_theta * factor,
            l_j_joint: self.l_j_joint * factor,
            ..*self
        }
    }

    fn contractive(&self) -> Result<()> {
        if self.rho < 1.0 && self.rho >= 0.0 {
            Ok(())
        } else {
            Err(Error::RhoNotContractive(self.rho))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    OneStepLinear,
    /// Approximate: the implicit bound holds under a joint Lipschitz assumption.
    ImplicitLinear,
    OneStepQuadratic,
    BilevelGradient,
}

impl BoundKind {
    pub fn label(&self) -> &'static str {
        match self {
            BoundKind::OneStepLinear => "onestep_linear",
            BoundKind::ImplicitLinear => "implicit_linear_approx",
            BoundKind::OneStepQuadratic => "onestep_quadratic",
            BoundKind::BilevelGradient => "bilevel_gradient",
        }
    }
}

/// `ρ L_F / (1 − ρ) + L_J ‖x_{k−1} − x̄‖`
pub fn bound_onestep(c: &ConstantsEstimate, dist_prev: f64) -> Result<f64> {
    c.contractive()?;
    Ok(c.rho * c.l_f / (1.0 - c.rho) + c.l_j_theta * dist_prev)
}

/// `(L_J L_F / (1 − ρ)² + L_J / (1 − ρ)) ‖x_k − x̄‖` with the joint modulus.
pub fn bound_implicit(c: &ConstantsEstimate, dist_k: f64) -> Result<f64> {
    c.contractive()?;
    let one_minus = 1.0 - c.rho;
    Ok((c.l_j_joint * c.l_f / (one_minus * one_minus) + c.l_j_joint / one_minus) * dist_k)
}

/// `L_J ‖x_{k−1} − x̄‖` for maps whose `J_xF` vanishes at the fixed point.
pub fn bound_onestep_quadratic(c: &ConstantsEstimate, dist_prev: f64) -> Result<f64> {
    if !(c.rho_final <= SUPERLINEAR_TOL) {
        return Err(Error::NotSuperlinear(c.rho_final));
    }
    Ok(c.l_j_joint * dist_prev)
}

/// `ρ L_F l_g / (1 − ρ) + L_J l_g ‖x_{k−1} − x̄‖ + L_F l_∇ ‖x̄ − x_k‖`
pub fn bound_bilevel(c: &ConstantsEstimate, l_g: f64, l_grad: f64, dist_prev: f64, dist_k: f64) -> Result<f64> {
    c.contractive()?;
    Ok(c.rho * c.l_f * l_g / (1.0 - c.rho) + c.l_j_theta * l_g * dist_prev + c.l_f * l_grad * dist_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantsMode {
    Analytic,
    TraceSampled,
}

/// Constants for a trace, either read from the map or sampled along the trace.
///
/// Sampling takes maxima of `‖J_xF‖op`, `‖J_θF‖op` over stored iterates and
/// Lipschitz moduli as difference quotients over consecutive iterates. Pairs
/// closer than `1e-10 · max(1, ‖x‖)` are skipped.
pub fn estimate_constants<M: AlgorithmMap + ?Sized>(
    map: &M,
    trace: &IterationTrace,
    mode: ConstantsMode,
) -> Result<ConstantsEstimate> {
    match mode {
        ConstantsMode::Analytic => map.analytic_constants(&trace.theta).ok_or(Error::NoAnalyticConstants),
        ConstantsMode::TraceSampled => {
            let xs = trace.stored();
            if xs.len() < 3 {
                return Err(Error::InsufficientTrace { len: xs.len() });
            }
            let jacs = xs
                .iter()
                .map(|x| map.jacobians(x, &trace.theta))
                .collect::<Result<Vec<(Matrix, Matrix)>>>()?;
            let mut rho = 0.0_f64;
            let mut l_f = 0.0_f64;
            for (a, b) in &jacs {
                rho = rho.max(operator_norm(a));
                l_f = l_f.max(operator_norm(b));
            }
            let mut l_j_theta = 0.0_f64;
            let mut l_j_joint = 0.0_f64;
            for i in 1..xs.len() {
                let dx = xs[i].distance(&xs[i - 1]);
                if dx <= 1e-10 * xs[i].norm().max(1.0) {
                    continue;
                }
                let db = jacs[i].1.sub(&jacs[i - 1].1);
                let da = jacs[i].0.sub(&jacs[i - 1].0);
                l_j_theta = l_j_theta.max(operator_norm(&db) / dx);
                l_j_joint = l_j_joint.max(operator_norm(&da.hstack(&db)) / dx);
            }
            let rho_final = operator_norm(&jacs.last().expect("nonempty").0);
            Ok(ConstantsEstimate {
                rho,
                l_f,
                l_j_theta,
                l_j_joint,
                rho_final,
                provenance: Provenance::TraceSampled,
            })
        }
    }
}

/// Both sides of the perturbation identity
/// `(I − A)⁻¹B − B̃ = A(I − A)⁻¹B + B − B̃` and the norm estimate
/// `‖(I − A)⁻¹B − B̃‖op ≤ ρ‖B‖op/(1 − ρ) + ‖B − B̃‖op` with `ρ = ‖A‖op`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationCheck {
    /// Largest elementwise difference between the two sides of the identity.
    pub identity_err: f64,
    pub lhs_norm: f64,
    pub estimate: f64,
}

pub fn perturbation_identity(a: &Matrix, b: &Matrix, b_tilde: &Matrix) -> Result<PerturbationCheck> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n || b_tilde.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "A {:?}, B {:?}, B̃ {:?}",
            a.shape(),
            b.shape(),
            b_tilde.shape()
        )));
    }
    let mut i_minus_a = a.scale(-1.0);
    i_minus_a.add_diag(1.0);
    let solved = lu_solve(&i_minus_a, b)?;
    let lhs = solved.sub(b_tilde);
    let rhs = a.matmul(&solved).add(&b.sub(b_tilde));
    let rho = operator_norm(a);
    let estimate = if rho < 1.0 {
        rho * operator_norm(b) / (1.0 - rho) + operator_norm(&b.sub(b_tilde))
    } else {
        f64::INFINITY
    };
    Ok(PerturbationCheck {
        identity_err: lhs.max_abs_diff(&rhs),
        lhs_norm: operator_norm(&lhs),
        estimate,
    })
}

/// A bound evaluated next to the measured error it controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub k: usize,
    pub measured_error: f64,
    pub bound_value: f64,
    pub satisfied: bool,
    pub constants: ConstantsEstimate,
    pub dist_prev: f64,
    pub dist_k: f64,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "kind,k,measured,bound,satisfied,rho,L_F,L_J,dist_prev,dist_k,provenance";

    pub fn new(
        kind: BoundKind,
        k: usize,
        measured_error: f64,
        bound_value: f64,
        constants: ConstantsEstimate,
        dist_prev: f64,
        dist_k: f64,
    ) -> Self {
        Self {
            kind,
            k,
            measured_error,
            bound_value,
            satisfied: measured_error <= bound_value + BOUND_SLACK,
            constants,
            dist_prev,
            dist_k,
        }
    }

    /// Evaluates the bound of `kind` and compares it with `measured_error`.
    /// The bilevel kind needs `(l_g, l_∇)` in `outer`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        kind: BoundKind,
        k: usize,
        measured_error: f64,
        constants: ConstantsEstimate,
        dist_prev: f64,
        dist_k: f64,
        outer: Option<(f64, f64)>,
    ) -> Result<Self> {
        let bound = match kind {
            BoundKind::OneStepLinear => bound_onestep(&constants, dist_prev)?,
            BoundKind::ImplicitLinear => bound_implicit(&constants, dist_k)?,
            BoundKind::OneStepQuadratic => bound_onestep_quadratic(&constants, dist_prev)?,
            BoundKind::BilevelGradient => {
                let (l_g, l_grad) = outer
                    .ok_or_else(|| Error::InvalidArgument("bilevel bound needs outer Lipschitz constants".into()))?;
                bound_bilevel(&constants, l_g, l_grad, dist_prev, dist_k)?
            }
        };
        Ok(Self::new(kind, k, measured_error, bound, constants, dist_prev, dist_k))
    }

    /// The Lipschitz modulus the bound of this kind uses.
    pub fn l_j(&self) -> f64 {
        match self.kind {
            BoundKind::OneStepLinear | BoundKind::BilevelGradient => self.constants.l_j_theta,
            BoundKind::ImplicitLinear | BoundKind::OneStepQuadratic => self.constants.l_j_joint,
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{}",
            self.kind.label(),
            self.k,
            self.measured_error,
            self.bound_value,
            self.satisfied,
            self.constants.rho,
            self.constants.l_f,
            self.l_j(),
            self.dist_prev,
            self.dist_k,
            self.constants.provenance
        )
    }
}
