//! One primal-dual interior-point step for
//! `min ½xᵀQx + cᵀx  s.t.  Ax = θ, Gx ≤ h` viewed as a fixed-point map on the
//! state `w = (x, s, ν, z)` with slacks `s > 0` and inequality multipliers `z > 0`.

use crate::error::{Error, Result};
use crate::fixed_point::{iterate_monitored, AlgorithmMap, IterateOptions, IterationTrace};
use crate::linalg::{LinalgError, Lu, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpParams {
    /// Centering parameter σ.
    pub sigma: f64,
    /// Fraction of the distance to the boundary a step may cover.
    pub fraction_to_boundary: f64,
    /// Steps shorter than this abort with `StepTooSmall`.
    pub min_step: f64,
    /// Primal residual above which a non-improving run counts as stalled.
    pub stall_tol: f64,
    /// Consecutive non-improving iterations before `Infeasible`.
    pub stall_iters: usize,
}

impl Default for IpParams {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            fraction_to_boundary: 0.99,
            min_step: 1e-12,
            stall_tol: 1e-6,
            stall_iters: 20,
        }
    }
}

/// QP data; `θ` (the equality right-hand side) is kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    pub q: Matrix,
    pub c: Vector,
    pub a: Matrix,
    pub g: Matrix,
    pub h: Vector,
}

impl QpInstance {
    pub fn new(q: Matrix, c: Vector, a: Matrix, g: Matrix, h: Vector) -> Result<Self> {
        let n = q.rows();
        if !q.is_square() || c.dim() != n || a.cols() != n || g.cols() != n || g.rows() != h.dim() {
            return Err(Error::DimensionMismatch(format!(
                "QP data shapes Q {:?}, c {}, A {:?}, G {:?}, h {}",
                q.shape(),
                c.dim(),
                a.shape(),
                g.shape(),
                h.dim()
            )));
        }
        if !(q.is_finite() && c.is_finite() && a.is_finite() && g.is_finite() && h.is_finite()) {
            return Err(Error::NonFinite("QP data"));
        }
        if !q.is_symmetric(1e-12 * q.max_abs().max(1.0)) {
            return Err(Error::InvalidArgument("QP matrix Q is not symmetric".into()));
        }
        Ok(Self { q, c, a, g, h })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn m_eq(&self) -> usize {
        self.a.rows()
    }

    pub fn p(&self) -> usize {
        self.g.rows()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&self.q.matvec(x)) + self.c.dot(x)
    }

    /// Number of scalar entries in `(Q, c, A, G, h)` as counted for timing runs:
    /// `n(n+1) + (n+1)m + (n+1)p`.
    pub fn parameter_count(&self) -> usize {
        let (n, m, p) = (self.n(), self.m_eq(), self.p());
        n * (n + 1) + (n + 1) * m + (n + 1) * p
    }
}

/// The interior-point iteration as an [`AlgorithmMap`] on `w = (x, s, ν, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpIpMap {
    inst: QpInstance,
    params: IpParams,
}

pub fn qp_ip_map(inst: QpInstance) -> QpIpMap {
    QpIpMap::new(inst, IpParams::default())
}

/// A computed step `w⁺ = w + αΔ`.
#[derive(Debug, Clone, PartialEq)]
pub struct IpStep {
    pub direction: Vector,
    pub alpha: f64,
    /// State index that limits the step, when the fraction-to-boundary rule is active.
    pub limiting: Option<usize>,
    pub next: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub trace: IterationTrace,
    pub state: Vector,
    pub x: Vector,
    pub gap: f64,
    pub primal_residual: f64,
}

impl QpIpMap {
    pub fn new(inst: QpInstance, params: IpParams) -> Self {
        Self { inst, params }
    }

    pub fn instance(&self) -> &QpInstance {
        &self.inst
    }

    pub fn params(&self) -> &IpParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.inst.n() + 2 * self.inst.p() + self.inst.m_eq()
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let (n, m, p) = (self.inst.n(), self.inst.m_eq(), self.inst.p());
        (0, n, n + p, n + p + m)
    }

    /// `(x, s, ν, z)`.
    pub fn split(&self, w: &Vector) -> (Vector, Vector, Vector, Vector) {
        let (n, m, p) = (self.inst.n(), self.inst.m_eq(), self.inst.p());
        let (_, os, onu, oz) = self.offsets();
        (w.segment(0, n), w.segment(os, p), w.segment(onu, m), w.segment(oz, p))
    }

    pub fn join(x: &Vector, s: &Vector, nu: &Vector, z: &Vector) -> Vector {
        Vector::concat(&[x, s, nu, z])
    }

    pub fn primal(&self, w: &Vector) -> Vector {
        w.segment(0, self.inst.n())
    }

    /// `x = 0`, `s = max(h, 1)`, `ν = 0`, `z = 1`.
    pub fn initial_state(&self) -> Vector {
        let (n, m, p) = (self.inst.n(), self.inst.m_eq(), self.inst.p());
        let s = Vector::from_fn(p, |j| self.inst.h[j].max(1.0));
        Self::join(&Vector::zeros(n), &s, &Vector::zeros(m), &Vector::from_elem(p, 1.0))
    }

    /// Duality measure `µ = sᵀz / p` (zero without inequalities).
    pub fn gap(&self, w: &Vector) -> f64 {
        let p = self.inst.p();
        if p == 0 {
            return 0.0;
        }
        let (_, s, _, z) = self.split(w);
        s.dot(&z) / p as f64
    }

    /// `‖(Ax − θ, Gx + s − h)‖`.
    pub fn primal_residual(&self, w: &Vector, theta: &Vector) -> f64 {
        let (x, s, _, _) = self.split(w);
        let r_eq = &self.inst.a.matvec(&x) - theta;
        let r_in = &(&self.inst.g.matvec(&x) + &s) - &self.inst.h;
        (r_eq.norm_sq() + r_in.norm_sq()).sqrt()
    }

    /// Residual `(r_d, r_in, r_eq, r_c)` with complementarity target `σ_c µ`.
    pub fn residual(&self, w: &Vector, theta: &Vector, sigma_c: f64) -> Vector {
        let inst = &self.inst;
        let (x, s, nu, z) = self.split(w);
        let mut r_d = &inst.q.matvec(&x) + &inst.c;
        r_d = &(&r_d + &inst.a.tr_matvec(&nu)) + &inst.g.tr_matvec(&z);
        let r_in = &(&inst.g.matvec(&x) + &s) - &inst.h;
        let r_eq = &inst.a.matvec(&x) - theta;
        let target = sigma_c * self.gap(w);
        let r_c = Vector::from_fn(s.dim(), |j| s[j] * z[j] - target);
        Vector::concat(&[&r_d, &r_in, &r_eq, &r_c])
    }

    /// Newton matrix of the residual with rows `[Q 0 Aᵀ Gᵀ; G I 0 0; A 0 0 0; 0 Z 0 S]`.
    pub fn kkt_matrix(&self, w: &Vector) -> Matrix {
        let inst = &self.inst;
        let (_, os, onu, oz) = self.offsets();
        let (_, s, _, z) = self.split(w);
        let dim = self.state_dim();
        let mut k = Matrix::zeros(dim, dim);
        k.set_block(0, 0, &inst.q);
        k.set_block(0, onu, &inst.a.transpose());
        k.set_block(0, oz, &inst.g.transpose());
        k.set_block(os, 0, &inst.g);
        for j in 0..inst.p() {
            k.set(os + j, os + j, 1.0);
            k.set(oz + j, os + j, z[j]);
            k.set(oz + j, oz + j, s[j]);
        }
        k.set_block(onu, 0, &inst.a);
        k
    }

    fn check_state(&self, w: &Vector) -> Result<()> {
        let (_, s, _, z) = self.split(w);
        if s.iter().chain(z.iter()).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument(
                "interior-point state needs strictly positive s and z".into(),
            ));
        }
        Ok(())
    }

    fn step_with(&self, w: &Vector, theta: &Vector, lu: &Lu) -> Result<IpStep> {
        let r = self.residual(w, theta, self.params.sigma);
        let direction = -&lu.solve_vec(&r)?;
        let (_, os, _, oz) = self.offsets();
        let p = self.inst.p();
        let mut ratio = f64::INFINITY;
        let mut limiting = None;
        for idx in (os..os + p).chain(oz..oz + p) {
            if direction[idx] < 0.0 {
                let r = -w[idx] / direction[idx];
                if r < ratio {
                    ratio = r;
                    limiting = Some(idx);
                }
            }
        }
        let scaled = self.params.fraction_to_boundary * ratio;
        let (alpha, limiting) = if scaled < 1.0 { (scaled, limiting) } else { (1.0, None) };
        if !(alpha >= self.params.min_step) {
            return Err(Error::StepTooSmall { alpha });
        }
        let mut next = w.clone();
        next.axpy(alpha, &direction);
        Ok(IpStep {
            direction,
            alpha,
            limiting,
            next,
        })
    }

    pub fn step(&self, w: &Vector, theta: &Vector) -> Result<IpStep> {
        self.check_state(w)?;
        let lu = Lu::factor(&self.kkt_matrix(w))?;
        self.step_with(w, theta, &lu)
    }

    /// Runs the iteration from [`Self::initial_state`] until the step residual
    /// drops to `tol`.
    pub fn solve(&self, theta: &Vector, tol: f64, max_iter: usize) -> Result<QpSolution> {
        self.solve_from(&self.initial_state(), theta, tol, max_iter)
    }

    pub fn solve_from(&self, w0: &Vector, theta: &Vector, tol: f64, max_iter: usize) -> Result<QpSolution> {
        let stall_tol = self.params.stall_tol;
        let stall_iters = self.params.stall_iters;
        let mut best = self.primal_residual(w0, theta);
        let mut stalled = 0usize;
        let monitor = |_: usize, w: &Vector| -> Result<bool> {
            let res = self.primal_residual(w, theta);
            if res > stall_tol && res > 0.99 * best {
                stalled += 1;
                if stalled >= stall_iters {
                    return Err(Error::Infeasible {
                        residual: res,
                        iterations: stalled,
                    });
                }
            } else {
                stalled = 0;
            }
            best = best.min(res);
            Ok(false)
        };
        let trace = match iterate_monitored(self, w0, theta, &IterateOptions::new(max_iter, tol), monitor) {
            // a collapsing step or a singular Newton matrix while primal
            // residuals are still large indicates infeasibility
            Err(e @ (Error::StepTooSmall { .. } | Error::Linalg(LinalgError::SingularMatrix { .. }))) => {
                log::debug!("interior point aborted: {e}");
                if best > stall_tol {
                    return Err(Error::Infeasible {
                        residual: best,
                        iterations: stalled,
                    });
                }
                return Err(e);
            }
            other => other?,
        };
        if !trace.converged {
            return Err(Error::NoConvergence {
                iterations: trace.k,
                residual: trace.step_residuals.last().copied().unwrap_or(f64::NAN),
            });
        }
        let state = trace.last().clone();
        Ok(QpSolution {
            x: self.primal(&state),
            gap: self.gap(&state),
            primal_residual: self.primal_residual(&state, theta),
            state,
            trace,
        })
    }

    /// Primal block of `K(w)⁻¹ E_eq`: the derivative of the QP solution in `θ`
    /// obtained by differentiating the KKT conditions at `w`.
    pub fn kkt_implicit_jacobian(&self, w: &Vector) -> Result<Matrix> {
        self.check_state(w)?;
        let lu = Lu::factor(&self.kkt_matrix(w))?;
        let full = lu.solve(&self.eq_selector())?;
        Ok(full.block(0, 0, self.inst.n(), self.inst.m_eq()))
    }

    /// `E_eq`: identity on the equality rows.
    fn eq_selector(&self) -> Matrix {
        let (_, _, onu, _) = self.offsets();
        let mut e = Matrix::zeros(self.state_dim(), self.inst.m_eq());
        for j in 0..self.inst.m_eq() {
            e.set(onu + j, j, 1.0);
        }
        e
    }
}

impl AlgorithmMap for QpIpMap {
    fn dims(&self) -> (usize, usize) {
        (self.state_dim(), self.inst.m_eq())
    }

    fn apply(&self, w: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(self.step(w, theta)?.next)
    }

    fn jac_x(&self, w: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(w, theta)?.0)
    }

    fn jac_theta(&self, w: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(self.jacobians(w, theta)?.1)
    }

    fn jacobians(&self, w: &Vector, theta: &Vector) -> Result<(Matrix, Matrix)> {
        self.check_state(w)?;
        let (m, p) = (self.inst.m_eq(), self.inst.p());
        let (_, os, onu, oz) = self.offsets();
        let dim = self.state_dim();
        let lu = Lu::factor(&self.kkt_matrix(w))?;
        let st = self.step_with(w, theta, &lu)?;
        let delta = &st.direction;

        // X = K⁻¹ [E_comp | E_eq]
        let mut rhs = Matrix::zeros(dim, p + m);
        for j in 0..p {
            rhs.set(oz + j, j, 1.0);
        }
        for j in 0..m {
            rhs.set(onu + j, p + j, 1.0);
        }
        let x_sol = lu.solve(&rhs)?;

        // Y = K⁻¹(σ e_c ∇µᵀ − C(Δ)); J_Δ,w = −I + Y
        let mut y = Matrix::zeros(dim, dim);
        if p > 0 {
            let sigma = self.params.sigma;
            let mut u = Vector::zeros(dim);
            for j in 0..p {
                u.axpy(sigma, &x_sol.col(j));
            }
            let pf = p as f64;
            for j in 0..p {
                let xj = x_sol.col(j);
                let (sj, zj) = (w[os + j], w[oz + j]);
                let (dsj, dzj) = (delta[os + j], delta[oz + j]);
                for i in 0..dim {
                    y.set(i, os + j, u[i] * zj / pf - dzj * xj[i]);
                    y.set(i, oz + j, u[i] * sj / pf - dsj * xj[i]);
                }
            }
        }
        let j_delta_theta = x_sol.block(0, p, dim, m);

        let alpha = st.alpha;
        let mut jw = y.scale(alpha);
        jw.add_diag(1.0 - alpha);
        let mut jt = j_delta_theta.scale(alpha);

        if let Some(r) = st.limiting {
            // α = f·(−w_r/Δ_r)
            let f = self.params.fraction_to_boundary;
            let (wr, dr) = (w[r], delta[r]);
            let c = wr / (dr * dr);
            let mut grad_w = Vector::from_fn(dim, |j| c * y.get(r, j));
            grad_w[r] += -1.0 / dr - c;
            let grad_t = Vector::from_fn(m, |j| c * j_delta_theta.get(r, j));
            for i in 0..dim {
                let di = f * delta[i];
                for j in 0..dim {
                    jw.set(i, j, jw.get(i, j) + di * grad_w[j]);
                }
                for j in 0..m {
                    jt.set(i, j, jt.get(i, j) + di * grad_t[j]);
                }
            }
        }
        Ok((jw, jt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::check_jacobians;
    use crate::problems::data::synthetic_qp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_qp() -> (QpIpMap, Vector) {
        // min ½‖x‖² − x₁ − x₂ s.t. x₁ + x₂ = θ, x ≤ 0.8
        let inst = QpInstance::new(
            Matrix::identity(2),
            Vector::from(vec![-1.0, -1.0]),
            Matrix::from_rows(&[&[1.0, 1.0]]),
            Matrix::identity(2),
            Vector::from(vec![0.8, 0.8]),
        )
        .unwrap();
        (qp_ip_map(inst), Vector::from(vec![1.0]))
    }

    #[test]
    fn converges_to_known_solution() {
        let (map, theta) = box_qp();
        let sol = map.solve(&theta, 1e-12, 200).unwrap();
        assert!(sol.x.distance(&Vector::from(vec![0.5, 0.5])) < 1e-9);
        assert!(sol.gap < 1e-9);
        assert!(sol.primal_residual < 1e-10);
        // dx/dθ = (½, ½) with both inequalities inactive
        let j = map.kkt_implicit_jacobian(&sol.state).unwrap();
        assert!((j.get(0, 0) - 0.5).abs() < 1e-8 && (j.get(1, 0) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn active_constraint_jacobian() {
        // θ = 1.9 forces x = (0.95, 0.95) infeasible for x ≤ 0.8; use h = (0.8, 2) instead
        let inst = QpInstance::new(
            Matrix::identity(2),
            Vector::from(vec![0.0, 0.0]),
            Matrix::from_rows(&[&[1.0, 1.0]]),
            Matrix::identity(2),
            Vector::from(vec![0.4, 2.0]),
        )
        .unwrap();
        let map = qp_ip_map(inst);
        let sol = map.solve(&Vector::from(vec![1.0]), 1e-12, 200).unwrap();
        // x₁ pinned at 0.4, x₂ = 0.6
        assert!(sol.x.distance(&Vector::from(vec![0.4, 0.6])) < 1e-8);
        let j = map.kkt_implicit_jacobian(&sol.state).unwrap();
        assert!(j.get(0, 0).abs() < 1e-7 && (j.get(1, 0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn equality_only_is_one_newton_step() {
        let inst = QpInstance::new(
            Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]),
            Vector::from(vec![1.0, -1.0]),
            Matrix::from_rows(&[&[1.0, 2.0]]),
            Matrix::zeros(0, 2),
            Vector::zeros(0),
        )
        .unwrap();
        let map = qp_ip_map(inst);
        let theta = Vector::from(vec![0.3]);
        let w1 = map.apply(&map.initial_state(), &theta).unwrap();
        let w2 = map.apply(&w1, &theta).unwrap();
        assert!(w1.distance(&w2) < 1e-14);
        let (jw, jt) = map.jacobians(&w1, &theta).unwrap();
        assert!(jw.max_abs() < 1e-14);
        let direct = map.kkt_implicit_jacobian(&w1).unwrap();
        assert!(jt.block(0, 0, 2, 1).max_abs_diff(&direct) < 1e-14);
    }

    #[test]
    fn gap_update_identity() {
        // µ⁺ = (1 − α(1 − σ))µ + α² ΔsᵀΔz / p
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (inst, theta) = synthetic_qp(&mut rng, 6, 2, 5);
        let map = qp_ip_map(inst);
        let mut w = map.initial_state();
        for _ in 0..15 {
            let st = map.step(&w, &theta).unwrap();
            let (_, ds, _, dz) = map.split(&st.direction);
            let mu = map.gap(&w);
            let predicted = (1.0 - st.alpha * (1.0 - map.params.sigma)) * mu + st.alpha * st.alpha * ds.dot(&dz) / 5.0;
            assert!((map.gap(&st.next) - predicted).abs() <= 1e-10 * mu.max(1e-300));
            w = st.next;
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (inst, theta) = synthetic_qp(&mut rng, 4, 2, 3);
        let map = qp_ip_map(inst);
        let dim = map.state_dim();
        let (os, oz) = (4, 4 + 3 + 2);
        let mut limited = 0;
        for _ in 0..10 {
            let mut w = Vector::from_fn(dim, |_| rng.gen_range(-1.0..1.0));
            for j in 0..3 {
                w[os + j] = rng.gen_range(0.5..2.0);
                w[oz + j] = rng.gen_range(0.5..2.0);
            }
            let st = map.step(&w, &theta).unwrap();
            limited += st.limiting.is_some() as usize;
            let chk = check_jacobians(&map, &w, &theta, 1e-6).unwrap();
            let scale = 1.0 + map.jacobians(&w, &theta).unwrap().0.max_abs();
            assert!(chk.max_err() < 1e-6 * scale, "{chk:?}");
        }
        assert!(limited > 0, "no step exercised the fraction-to-boundary rule");
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // x ≤ −1 and −x ≤ −1 cannot both hold
        let inst = QpInstance::new(
            Matrix::identity(1),
            Vector::zeros(1),
            Matrix::zeros(0, 1),
            Matrix::from_rows(&[&[1.0], &[-1.0]]),
            Vector::from(vec![-1.0, -1.0]),
        )
        .unwrap();
        let err = qp_ip_map(inst).solve(&Vector::zeros(0), 1e-12, 500).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }), "{err:?}");
    }

    #[test]
    fn rejects_nonpositive_state() {
        let (map, theta) = box_qp();
        let mut w = map.initial_state();
        w[2] = 0.0;
        assert!(map.apply(&w, &theta).unwrap_err().is_config());
    }
}
