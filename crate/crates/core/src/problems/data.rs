//! Seeded synthetic instances.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problems::logistic::LogisticNewton;
use crate::problems::qp::QpInstance;
use crate::problems::ridge::WeightedRidge;

/// `n` points log-spaced from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_| rng.sample(StandardNormal))
}

/// `rows × cols` matrix with orthonormal columns (`cols ≤ rows`).
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    assert!(cols <= rows, "need cols <= rows");
    let mut basis: Vec<Vector> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian_vector(rng, rows);
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let c = v.dot(b);
                v.axpy(-c, b);
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            basis.push(v.scale(1.0 / nv));
        }
    }
    Matrix::from_columns(&basis)
}

/// `U diag(eigs) Uᵀ` with a random orthogonal `U`, symmetrised exactly.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, eigs: &[f64]) -> Matrix {
    let n = eigs.len();
    let u = random_orthonormal(rng, n, n);
    let ud = Matrix::from_fn(n, n, |i, j| u.get(i, j) * eigs[j]);
    let m = ud.matmul(&u.transpose());
    Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
}

/// Ridge data whose unit-weight Hessian `AᵀA + λI` has eigenvalues log-spaced
/// in `[1, cond]`. Needs `n_samples ≥ n_features` and `0 < λ < 1`.
pub fn synthetic_ridge<R: Rng + ?Sized>(
    rng: &mut R,
    n_samples: usize,
    n_features: usize,
    cond: f64,
    lambda: f64,
) -> Result<WeightedRidge> {
    if n_samples < n_features || n_features == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < n_features ≤ n_samples, got {n_features} and {n_samples}"
        )));
    }
    if !(cond >= 1.0) || !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need cond ≥ 1 and 0 < λ < 1, got {cond} and {lambda}"
        )));
    }
    let eig = log_spaced(1.0, cond, n_features);
    let u = random_orthonormal(rng, n_samples, n_features);
    let v = random_orthonormal(rng, n_features, n_features);
    let us = Matrix::from_fn(n_samples, n_features, |i, j| u.get(i, j) * (eig[j] - lambda).sqrt());
    let design = us.matmul(&v.transpose());
    let x_true = gaussian_vector(rng, n_features);
    let mut targets = design.matvec(&x_true);
    targets.axpy(0.1, &gaussian_vector(rng, n_samples));
    WeightedRidge::new(design, targets, lambda)
}

/// Two overlapping Gaussian classes in `n_features − 1` dimensions plus an
/// intercept column of ones at index 0. Labels are balanced and shuffled.
pub fn synthetic_logistic<R: Rng + ?Sized>(
    rng: &mut R,
    n_samples: usize,
    n_features: usize,
    lambda: f64,
) -> Result<LogisticNewton> {
    if n_features == 0 || n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least one feature and two samples, got {n_features} and {n_samples}"
        )));
    }
    let mut labels: Vec<f64> = (0..n_samples).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    labels.shuffle(rng);
    let d = n_features - 1;
    let mut shift = gaussian_vector(rng, d);
    let ns = shift.norm();
    if ns > 0.0 {
        shift = shift.scale(0.75 / ns);
    }
    let mut design = Matrix::zeros(n_samples, n_features);
    for i in 0..n_samples {
        design.set(i, 0, 1.0);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            design.set(i, j + 1, labels[i] * shift[j] + z);
        }
    }
    LogisticNewton::new(design, Vector::from(labels), lambda)
}

/// Strictly feasible QP with `Q = MᵀM/n + I` and a random interior point.
/// Returns the instance and a feasible `θ = A x_feas`.
pub fn synthetic_qp<R: Rng + ?Sized>(rng: &mut R, n: usize, m_eq: usize, p: usize) -> (QpInstance, Vector) {
    let m = gaussian_matrix(rng, n, n);
    let mut q = m.tr_matmul(&m).scale(1.0 / n as f64);
    q.add_diag(1.0);
    let q = Matrix::from_fn(n, n, |i, j| 0.5 * (q.get(i, j) + q.get(j, i)));
    let c = gaussian_vector(rng, n);
    let a = gaussian_matrix(rng, m_eq, n);
    let g = gaussian_matrix(rng, p, n);
    let x_feas = gaussian_vector(rng, n);
    let slack = Vector::from_fn(p, |_| rng.gen_range(0.5..1.5));
    let h = &g.matvec(&x_feas) + &slack;
    let theta = a.matvec(&x_feas);
    let inst = QpInstance::new(q, c, a, g, h).expect("generated QP data is consistent");
    (inst, theta)
}
