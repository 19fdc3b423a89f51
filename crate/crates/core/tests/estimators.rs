use fpdiff::bounds::{bound_onestep, estimate_constants, ConstantsMode};
use fpdiff::estimators::{
    estimate, jac_autodiff, jac_finite_difference, jac_implicit, jac_implicit_at, jac_onestep, jac_onestep_k, Method,
};
use fpdiff::fixed_point::{compose_k, iterate, iterate_with, reference_fixed_point, IterateOptions};
use fpdiff::linalg::{lu_solve, operator_norm, Matrix, Vector};
use fpdiff::problems::data::{gaussian_matrix, gaussian_vector};
use fpdiff::problems::{
    ridge_map, ridge_truth_jacobian, synthetic_logistic, synthetic_ridge, AffineMap, ConstantMap, QuadraticInner,
    StepRule,
};
use fpdiff::{AlgorithmMap, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_affine(seed: u64, n: usize, m: usize, norm: f64) -> AffineMap {
    let mut r = rng(seed);
    let a = gaussian_matrix(&mut r, n, n);
    let a = a.scale(norm / operator_norm(&a));
    AffineMap::new(a, gaussian_matrix(&mut r, n, m)).unwrap()
}

fn i_minus(a: &Matrix) -> Matrix {
    let mut m = a.scale(-1.0);
    m.add_diag(1.0);
    m
}

#[test]
fn affine_autodiff_is_truncated_neumann_series() {
    let map = random_affine(1, 5, 3, 0.7);
    let theta = Vector::from_elem(3, 0.5);
    for k in [1, 2, 7, 15] {
        let trace = iterate_with(&map, &Vector::zeros(5), &theta, &IterateOptions::fixed_steps(k)).unwrap();
        let j = jac_autodiff(&map, &trace, None).unwrap();
        // independent oracle: explicit power sum
        let mut power = Matrix::identity(5);
        let mut sum = Matrix::zeros(5, 5);
        for _ in 0..k {
            sum = sum.add(&power);
            power = power.matmul(map.a());
        }
        let expected = sum.matmul(map.b());
        assert!(j.matrix.max_abs_diff(&expected) < 1e-12, "k = {k}");
        assert_eq!(j.costs.jac_theta_evals, k as u64);
        assert_eq!(j.costs.jac_x_evals, k as u64 - 1);
    }
}

#[test]
fn constant_map_estimators_are_identity() {
    let map = ConstantMap::new(4);
    let theta = Vector::from_fn(4, |i| i as f64);
    let trace = iterate_with(&map, &Vector::zeros(4), &theta, &IterateOptions::fixed_steps(1)).unwrap();
    for method in [Method::Autodiff, Method::Implicit, Method::OneStep, Method::KStep(1)] {
        let j = estimate(&map, &trace, method).unwrap();
        assert!(j.matrix.max_abs_diff(&Matrix::identity(4)) == 0.0, "{method}");
    }
    let fd = jac_finite_difference(&map, &Vector::zeros(4), &theta, 1e-12).unwrap();
    assert!(fd.matrix.max_abs_diff(&Matrix::identity(4)) < 1e-9);
}

#[test]
fn implicit_on_affine_map_is_exact_anywhere() {
    let map = random_affine(2, 6, 2, 0.9);
    let theta = Vector::from_elem(2, 1.0);
    let expected = lu_solve(&i_minus(map.a()), map.b()).unwrap();
    for x in [Vector::zeros(6), Vector::from_fn(6, |i| 10.0 * i as f64)] {
        let j = jac_implicit(&map, &x, &theta).unwrap();
        assert!(j.matrix.max_abs_diff(&expected) < 1e-12);
        assert_eq!(
            (j.costs.jac_x_evals, j.costs.jac_theta_evals, j.costs.linear_solves),
            (1, 1, 1)
        );
    }
    let fd = jac_finite_difference(&map, &Vector::zeros(6), &theta, 1e-12).unwrap();
    assert!(fd.matrix.max_abs_diff(&expected) < 1e-6);
}

#[test]
fn implicit_reports_singular_system_for_expansive_direction() {
    let map = AffineMap::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
    let err = jac_implicit(&map, &Vector::zeros(3), &Vector::zeros(3)).unwrap_err();
    assert!(matches!(err, Error::Linalg(_)), "{err:?}");
}

#[test]
fn onestep_counts_one_jac_theta_regardless_of_k() {
    let map = random_affine(3, 4, 4, 0.5);
    let theta = Vector::from_elem(4, 1.0);
    for k in [1, 3, 40] {
        let trace = iterate_with(&map, &Vector::zeros(4), &theta, &IterateOptions::fixed_steps(k)).unwrap();
        let j = jac_onestep(&map, &trace).unwrap();
        assert_eq!(
            (j.costs.jac_theta_evals, j.costs.jac_x_evals, j.costs.linear_solves),
            (1, 0, 0)
        );
        assert_eq!(j.at_iteration, k);
    }
}

#[test]
fn empty_trace_and_oversized_window_are_rejected() {
    let map = random_affine(4, 3, 3, 0.5);
    let theta = Vector::zeros(3);
    let trace = iterate_with(&map, &Vector::zeros(3), &theta, &IterateOptions::fixed_steps(0)).unwrap();
    assert_eq!(jac_onestep(&map, &trace).unwrap_err(), Error::EmptyTrace);
    let trace = iterate_with(&map, &Vector::zeros(3), &theta, &IterateOptions::fixed_steps(3)).unwrap();
    assert_eq!(
        jac_onestep_k(&map, &trace, 4).unwrap_err(),
        Error::WindowTooLarge { window: 4, k: 3 }
    );
}

#[test]
fn quadratic_onestep_is_alpha_identity_within_the_bound() {
    let mut r = rng(5);
    for rule in [StepRule::InvL, StepRule::TwoOverMuL] {
        let q = QuadraticInner::random(&mut r, 6, 30.0, rule).unwrap();
        let theta = gaussian_vector(&mut r, 6);
        let trace = iterate(&q, &Vector::zeros(6), &theta, 5, 1e-300).unwrap();
        let j = jac_onestep(&q, &trace).unwrap();
        let expected = Matrix::identity(6).scale(q.alpha());
        assert!(j.matrix.max_abs_diff(&expected) < 1e-15);
        let err = operator_norm(&j.matrix.sub(&q.truth_jacobian().unwrap()));
        let c = q.analytic_constants(&theta).unwrap();
        let bound = bound_onestep(&c, 0.0).unwrap();
        assert!(err <= bound + 1e-8, "{err} > {bound}");
    }
}

#[test]
fn kstep_full_window_matches_autodiff_and_unit_window_matches_onestep() {
    let mut r = rng(6);
    let prob = synthetic_ridge(&mut r, 20, 4, 10.0, 0.1).unwrap();
    let theta = Vector::from_elem(20, 1.0);
    let map = ridge_map(prob, StepRule::InvL, &theta).unwrap();
    let trace = iterate_with(&map, &Vector::zeros(4), &theta, &IterateOptions::fixed_steps(12)).unwrap();
    let full = jac_onestep_k(&map, &trace, 12).unwrap();
    let ad = jac_autodiff(&map, &trace, None).unwrap();
    assert!(full.matrix.max_abs_diff(&ad.matrix) <= 1e-12);
    let one = jac_onestep_k(&map, &trace, 1).unwrap();
    assert_eq!(one.matrix, jac_onestep(&map, &trace).unwrap().matrix);
}

#[test]
fn kstep_equals_onestep_of_composed_map_on_thinned_trace() {
    let map = random_affine(7, 4, 2, 0.8);
    let theta = Vector::from_elem(2, 1.0);
    let (w, blocks) = (3, 4);
    let trace = iterate_with(
        &map,
        &Vector::zeros(4),
        &theta,
        &IterateOptions::fixed_steps(w * blocks),
    )
    .unwrap();
    let kstep = jac_onestep_k(&map, &trace, w).unwrap();
    let composed = compose_k(map.clone(), w).unwrap();
    let thinned = iterate_with(
        &composed,
        &Vector::zeros(4),
        &theta,
        &IterateOptions::fixed_steps(blocks),
    )
    .unwrap();
    assert!(thinned.last().distance(trace.last()) < 1e-12);
    let os = jac_onestep(&composed, &thinned).unwrap();
    assert!(kstep.matrix.max_abs_diff(&os.matrix) < 1e-12);
}

#[test]
fn kstep_error_on_affine_map_decays_by_operator_norm() {
    // symmetric A: the Neumann tail A^K (I - A)^{-1} B has norm exactly ρ^K ‖(I - A)^{-1}B‖
    // along the top eigenvector when B is aligned with it
    let rho = 0.6;
    let a = Matrix::from_diag(&[rho, 0.3, -0.2]);
    let b = Matrix::from_rows(&[&[1.0], &[0.5], &[0.25]]);
    let map = AffineMap::new(a.clone(), b.clone()).unwrap();
    let theta = Vector::from_elem(1, 1.0);
    let truth = lu_solve(&i_minus(&a), &b).unwrap();
    let trace = iterate_with(&map, &Vector::zeros(3), &theta, &IterateOptions::fixed_steps(30)).unwrap();
    let errs: Vec<f64> = (1..=20)
        .map(|w| operator_norm(&jac_onestep_k(&map, &trace, w).unwrap().matrix.sub(&truth)))
        .collect();
    for w in 10..errs.len() {
        assert!(
            (errs[w] / errs[w - 1] - rho).abs() < 1e-6,
            "window {}: ratio {}",
            w + 1,
            errs[w] / errs[w - 1]
        );
    }
}

#[test]
fn ridge_estimators_converge_to_closed_form() {
    let mut r = rng(8);
    let prob = synthetic_ridge(&mut r, 30, 5, 20.0, 0.1).unwrap();
    let theta = Vector::from_fn(30, |i| 0.5 + (i % 3) as f64 * 0.5);
    let truth = ridge_truth_jacobian(&prob, &theta).unwrap();
    let x_bar = prob.solve(&theta).unwrap();
    let map = ridge_map(prob, StepRule::TwoOverMuL, &theta).unwrap();
    let id = jac_implicit(&map, &x_bar, &theta).unwrap();
    assert!(id.matrix.max_abs_diff(&truth) < 1e-8);
    let trace = iterate_with(&map, &Vector::zeros(5), &theta, &IterateOptions::fixed_steps(600)).unwrap();
    let oracle = jac_implicit(
        &map,
        &reference_fixed_point(&map, &Vector::zeros(5), &theta).unwrap(),
        &theta,
    )
    .unwrap();
    let ad = jac_autodiff(&map, &trace, None).unwrap();
    assert!(ad.matrix.max_abs_diff(&oracle.matrix) < 1e-7);
    let fd = jac_finite_difference(&map, &x_bar, &theta, 1e-12).unwrap();
    assert!(fd.matrix.max_abs_diff(&truth) < 1e-5);
}

#[test]
fn newton_onestep_becomes_exact_with_rate_bounded_by_sampled_modulus() {
    let mut r = rng(9);
    let map = synthetic_logistic(&mut r, 40, 5, 0.1).unwrap();
    let theta = Vector::from_elem(40, 1.0);
    let x0 = Vector::zeros(5);
    let x_bar = reference_fixed_point(&map, &x0, &theta).unwrap();
    let fd = jac_finite_difference(&map, &x_bar, &theta, 1e-13).unwrap().matrix;
    let trace = iterate_with(&map, &x0, &theta, &IterateOptions::fixed_steps(12)).unwrap();
    let last = jac_onestep(&map, &trace).unwrap();
    assert!(operator_norm(&last.matrix.sub(&fd)) <= 1e-8);
    // finite differences carry ~1e-9 noise, below which the rate check needs the implicit oracle
    let truth = jac_implicit(&map, &x_bar, &theta).unwrap().matrix;
    assert!(truth.max_abs_diff(&fd) < 1e-6);
    let l_j = estimate_constants(&map, &trace, ConstantsMode::TraceSampled)
        .unwrap()
        .l_j_theta;
    for k in 1..=trace.k {
        let prefix = trace.prefix(k).unwrap();
        if !map.is_smooth_at(prefix.try_get(k - 1).unwrap(), &theta).unwrap() {
            continue;
        }
        let err = operator_norm(&jac_onestep(&map, &prefix).unwrap().matrix.sub(&truth));
        let dist = prefix.try_get(k - 1).unwrap().distance(&x_bar);
        assert!(err <= l_j * dist + 1e-9, "k = {k}: {err} > {}", l_j * dist);
    }
}

#[test]
fn implicit_at_trace_uses_last_iterate() {
    let map = random_affine(10, 3, 3, 0.4);
    let theta = Vector::from_elem(3, 2.0);
    let trace = iterate_with(&map, &Vector::zeros(3), &theta, &IterateOptions::fixed_steps(4)).unwrap();
    let a = jac_implicit_at(&map, &trace).unwrap();
    let b = jac_implicit(&map, trace.last(), &theta).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.at_iteration, 4);
}
