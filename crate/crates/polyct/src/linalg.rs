//! Small shared numerical kernels.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::rng::seeded;
use rand::Rng;

/// Largest eigenvalue of a symmetric PSD operator given as `v -> M v`, by
/// power iteration on a fixed-seed random start. Converges when the Rayleigh
/// quotient changes by less than `tol` relatively.
pub fn power_method_lambda_max<F>(apply: F, dim: usize, tol: f64, max_iters: usize) -> Result<f64>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let mut rng = seeded(0x9e3779b97f4a7c15);
    let mut v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.gen::<f64>() - 0.5));
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return Err(Error::Validation("power method: zero start vector".into()));
    }
    v /= norm;
    let mut lambda = 0.0f64;
    for _ in 0..max_iters {
        let w = apply(&v);
        let new_lambda = v.dot(&w);
        let w_norm = w.dot(&w).sqrt();
        if w_norm == 0.0 {
            return Ok(0.0); // operator is zero on the reachable subspace
        }
        v = w / w_norm;
        if (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1e-300) {
            return Ok(new_lambda);
        }
        lambda = new_lambda;
    }
    Err(Error::NonConvergence {
        what: "power method",
        iters: max_iters,
        residual: lambda,
    })
}

/// lambda_max of the correlation matrix Sigma = A'A/n.
pub fn lambda_max_correlation(matrix: &crate::geometry::SystemMatrix, tol: f64) -> Result<f64> {
    let n = matrix.n_rows() as f64;
    power_method_lambda_max(
        |v| {
            let av = matrix.matvec(&v.view());
            matrix.rmatvec(&av.view()) / n
        },
        matrix.n_cols(),
        tol,
        20_000,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn power_method_on_diagonal() {
        let diag = [3.0, 1.0, 0.5, 7.5, 2.0];
        let lam = power_method_lambda_max(
            |v| Array1::from_iter(v.iter().zip(diag.iter()).map(|(x, d)| x * d)),
            diag.len(),
            1e-10,
            10_000,
        )
        .unwrap();
        assert!((lam - 7.5).abs() < 1e-8);
    }

    #[test]
    fn lambda_max_matches_dense_gram() {
        let a = crate::geometry::build_gaussian_matrix(40, 12, 4);
        let lam = lambda_max_correlation(&a, 1e-10).unwrap();
        // dense reference: power iteration on the explicit Gram matrix
        let dense = match a.storage() {
            crate::geometry::MatrixStorage::Dense(m) => m.clone(),
            _ => unreachable!(),
        };
        let gram: Array2<f64> = dense.t().dot(&dense) / 40.0;
        let reference =
            power_method_lambda_max(|v| gram.dot(v), 12, 1e-12, 20_000).unwrap();
        assert!((lam - reference).abs() < 1e-6 * reference);
    }
}
