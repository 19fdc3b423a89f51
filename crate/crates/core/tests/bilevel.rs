use fpdiff::bilevel::{
    hypergradient, hypergradient_bound, hypergradient_descent, true_hypergradient, BilevelProblem, DescentOptions,
    HalfSquaredDistance, LeastSquares, OuterObjective,
};
use fpdiff::estimators::Method;
use fpdiff::experiments::{quadratic_toy, toy_certificate};
use fpdiff::fixed_point::reference_fixed_point;
use fpdiff::linalg::Vector;
use fpdiff::problems::data::{gaussian_matrix, gaussian_vector};
use fpdiff::problems::{ridge_map, synthetic_ridge, StepRule};
use fpdiff::AlgorithmMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central differences of θ ↦ g(x̄(θ)).
fn fd_outer_gradient<M: AlgorithmMap, G: OuterObjective>(p: &BilevelProblem<M, G>, theta: &Vector) -> Vector {
    let h = 1e-5;
    Vector::from_fn(theta.dim(), |j| {
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let gp = p.outer.value(&reference_fixed_point(&p.inner, &p.x0, &tp).unwrap());
        let gm = p.outer.value(&reference_fixed_point(&p.inner, &p.x0, &tm).unwrap());
        (gp - gm) / (2.0 * h)
    })
}

#[test]
fn true_hypergradient_matches_finite_differences_on_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = synthetic_ridge(&mut rng, 15, 4, 10.0, 0.1).unwrap();
    let theta = Vector::from_fn(15, |i| 0.8 + 0.03 * i as f64);
    let map = ridge_map(train, StepRule::TwoOverMuL, &theta).unwrap();
    let outer = LeastSquares::new(gaussian_matrix(&mut rng, 6, 4), gaussian_vector(&mut rng, 6)).unwrap();
    let p = BilevelProblem::new(map, outer, Vector::zeros(4)).unwrap();
    let (grad, _) = true_hypergradient(&p, &theta).unwrap();
    let fd = fd_outer_gradient(&p, &theta);
    assert!(
        grad.distance(&fd) <= 1e-6 * (1.0 + grad.norm()),
        "{}",
        grad.distance(&fd)
    );
}

#[test]
fn estimated_hypergradients_approach_truth_with_inner_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let toy = quadratic_toy(&mut rng, 5, 10.0, StepRule::TwoOverMuL).unwrap();
    let theta = gaussian_vector(&mut rng, 5);
    let (truth, _) = true_hypergradient(&toy.problem, &theta).unwrap();
    let err = |k, m| {
        hypergradient(&toy.problem, &theta, k, m)
            .unwrap()
            .gradient
            .distance(&truth)
    };
    assert!(err(400, Method::Autodiff) < 1e-8);
    assert!(err(400, Method::Implicit) < 1e-8);
    assert!(err(5, Method::Autodiff) > err(50, Method::Autodiff));
}

#[test]
fn onestep_hypergradient_error_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let toy = quadratic_toy(&mut rng, 6, 20.0, StepRule::InvL).unwrap();
        let theta = gaussian_vector(&mut rng, 6);
        let (truth, x_bar) = true_hypergradient(&toy.problem, &theta).unwrap();
        let c = toy.problem.inner.analytic_constants(&theta).unwrap();
        for k in [1, 3, 10, 60] {
            let hg = hypergradient(&toy.problem, &theta, k, Method::OneStep).unwrap();
            let bound = hypergradient_bound(&toy.problem.outer, &c, &hg.trace, &x_bar).unwrap();
            let err = hg.gradient.distance(&truth);
            assert!(err <= bound + 1e-8, "k = {k}: {err} > {bound}");
        }
    }
}

#[test]
fn exact_descent_on_toy_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let toy = quadratic_toy(&mut rng, 4, 5.0, StepRule::TwoOverMuL).unwrap();
    let theta0 = gaussian_vector(&mut rng, 4);
    let opts = DescentOptions::new(1.0 / toy.l_outer, 30, 300, Method::Implicit).with_truth();
    let run = hypergradient_descent(&toy.problem, &theta0, &opts).unwrap();
    let values: Vec<f64> = run.true_values.iter().map(|v| v.unwrap()).collect();
    for w in values.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{} > {}", w[1], w[0]);
    }
    assert_eq!(run.thetas.len(), 31);
}

#[test]
fn toy_certificate_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let toy = quadratic_toy(&mut rng, 5, 10.0, StepRule::TwoOverMuL).unwrap();
    let theta0 = gaussian_vector(&mut rng, 5);
    let (run, cert) = toy_certificate(&toy, &theta0, 50, 10).unwrap();
    assert_eq!(run.steps(), 50);
    assert!(cert.satisfied, "{cert:?}");
    assert!(cert.min_grad_sq <= cert.certificate);
}

#[test]
fn warm_start_reuses_inner_iterate() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let toy = quadratic_toy(&mut rng, 3, 4.0, StepRule::InvL).unwrap();
    let theta0 = gaussian_vector(&mut rng, 3);
    let cold = hypergradient_descent(&toy.problem, &theta0, &DescentOptions::new(0.5, 5, 2, Method::OneStep)).unwrap();
    let warm = hypergradient_descent(
        &toy.problem,
        &theta0,
        &DescentOptions::new(0.5, 5, 2, Method::OneStep).with_warm_start(),
    )
    .unwrap();
    assert_eq!(cold.hypergrads[0], warm.hypergrads[0]);
    assert_ne!(cold.g_values[4], warm.g_values[4]);
}

#[test]
fn half_squared_distance_gradient() {
    let g = HalfSquaredDistance {
        target: Vector::from(vec![1.0, -2.0]),
    };
    let x = Vector::from(vec![3.0, 0.0]);
    assert!((g.value(&x) - 4.0).abs() < 1e-14);
    assert_eq!(g.gradient(&x).as_slice(), &[2.0, 2.0]);
}
