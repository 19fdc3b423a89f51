use fpdiff::bounds::{
    bound_bilevel, bound_implicit, bound_onestep, bound_onestep_quadratic, perturbation_identity, ConstantsEstimate,
};
use fpdiff::linalg::{lu_solve, operator_norm, symmetric_eigenvalues, Cholesky, Matrix, Vector};
use proptest::prelude::*;

/// Largest singular value by one-sided Jacobi rotations on the columns.
fn jacobi_sigma_max(a: &Matrix) -> f64 {
    let (m, n) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    for _ in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = u.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    u.iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn matrix(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0_f64, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn square(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    n.prop_flat_map(|n| prop::collection::vec(-3.0..3.0_f64, n * n).prop_map(move |d| Matrix::new(n, n, d).unwrap()))
}

fn consts() -> impl Strategy<Value = ConstantsEstimate> {
    (0.0..0.99_f64, 0.0..10.0_f64, 0.0..10.0_f64, 0.0..10.0_f64)
        .prop_map(|(rho, l_f, l_t, extra)| ConstantsEstimate::analytic(rho, l_f, l_t, l_t + extra, rho))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_norm_matches_jacobi_svd(a in matrix(1..=7, 1..=7)) {
        let expected = jacobi_sigma_max(&a);
        let got = operator_norm(&a);
        prop_assert!((got - expected).abs() <= 1e-8 * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn operator_norm_is_between_max_entry_and_frobenius(a in matrix(1..=6, 1..=6)) {
        let n = operator_norm(&a);
        prop_assert!(n <= a.frobenius_norm() * (1.0 + 1e-10) + 1e-12);
        prop_assert!(n >= a.max_abs() * (1.0 - 1e-10) - 1e-12);
    }

    #[test]
    fn lu_solve_has_small_residual(a in square(1..=8), b in prop::collection::vec(-5.0..5.0_f64, 8)) {
        let n = a.rows();
        // diagonal shift keeps the system well conditioned
        let mut a = a;
        a.add_diag(4.0 * n as f64);
        let rhs = Matrix::new(n, 1, b[..n].to_vec()).unwrap();
        let x = lu_solve(&a, &rhs).unwrap();
        prop_assert!(a.matmul(&x).max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn cholesky_solve_agrees_with_lu(a in square(1..=6), b in prop::collection::vec(-5.0..5.0_f64, 6)) {
        let n = a.rows();
        let mut spd = a.tr_matmul(&a);
        spd.add_diag(1.0);
        let rhs = Vector::new(b[..n].to_vec()).unwrap();
        let x = Cholesky::factor(&spd).unwrap().solve_vec(&rhs).unwrap();
        let y = lu_solve(&spd, &Matrix::new(n, 1, b[..n].to_vec()).unwrap()).unwrap();
        prop_assert!((0..n).all(|i| (x[i] - y.get(i, 0)).abs() < 1e-8 * (1.0 + y.get(i, 0).abs())));
    }

    #[test]
    fn symmetric_eigenvalues_sum_to_trace(a in square(1..=6)) {
        let s = a.add(&a.transpose());
        let eigs = symmetric_eigenvalues(&s).unwrap();
        let trace: f64 = s.diagonal().iter().sum();
        prop_assert!((eigs.iter().sum::<f64>() - trace).abs() < 1e-9 * (1.0 + trace.abs()));
        let top = eigs.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        prop_assert!((top - operator_norm(&s)).abs() < 1e-8 * top.max(1.0));
    }

    #[test]
    fn perturbation_identity_holds_for_contractions(
        a in square(1..=6),
        b in prop::collection::vec(-3.0..3.0_f64, 36),
        d in prop::collection::vec(-1.0..1.0_f64, 36),
        rho in 0.0..0.9_f64,
        m in 1..=6_usize,
    ) {
        let n = a.rows();
        let norm = operator_norm(&a);
        let a = if norm > 0.0 { a.scale(rho / norm) } else { a };
        let b = Matrix::new(n, m, b[..n * m].to_vec()).unwrap();
        let bt = b.add(&Matrix::new(n, m, d[..n * m].to_vec()).unwrap());
        let chk = perturbation_identity(&a, &b, &bt).unwrap();
        prop_assert!(chk.identity_err <= 1e-10);
        prop_assert!(chk.lhs_norm <= chk.estimate + 1e-9);
    }

    #[test]
    fn bounds_grow_with_distance(c in consts(), d1 in 0.0..5.0_f64, d2 in 0.0..5.0_f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(bound_onestep(&c, lo).unwrap() <= bound_onestep(&c, hi).unwrap());
        prop_assert!(bound_implicit(&c, lo).unwrap() <= bound_implicit(&c, hi).unwrap());
        prop_assert!(bound_bilevel(&c, 1.0, 1.0, lo, lo).unwrap() <= bound_bilevel(&c, 1.0, 1.0, hi, hi).unwrap());
    }

    #[test]
    fn bounds_grow_with_rho(c in consts(), dr in 0.0..0.5_f64, d in 0.0..5.0_f64) {
        let mut worse = c;
        worse.rho = (c.rho + dr).min(0.995);
        prop_assert!(bound_onestep(&c, d).unwrap() <= bound_onestep(&worse, d).unwrap());
        prop_assert!(bound_implicit(&c, d).unwrap() <= bound_implicit(&worse, d).unwrap());
    }

    #[test]
    fn bounds_reject_non_contractions(c in consts(), rho in 1.0..3.0_f64) {
        let mut bad = c;
        bad.rho = rho;
        prop_assert!(bound_onestep(&bad, 1.0).is_err());
        prop_assert!(bound_implicit(&bad, 1.0).is_err());
    }

    #[test]
    fn quadratic_bound_needs_vanishing_jacobian(c in consts(), d in 0.0..5.0_f64) {
        let mut c = c;
        c.rho_final = 0.0;
        prop_assert!((bound_onestep_quadratic(&c, d).unwrap() - c.l_j_joint * d).abs() < 1e-12);
        c.rho_final = 0.5;
        prop_assert!(bound_onestep_quadratic(&c, d).is_err());
    }
}
