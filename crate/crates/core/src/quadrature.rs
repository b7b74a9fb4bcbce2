//! Gauss–Hermite rules for expectations under a normal distribution.

use nalgebra::DMatrix;

/// Nodes and weights for E[f(Z)], Z ~ N(0, 1) (probabilists' form, weights
/// summing to one), from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "need at least one node");
    let mut jac = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// E[f(m + s·Z)] for Z ~ N(0, 1).
pub fn normal_expectation(mean: f64, sd: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite_normal(n);
    x.iter().zip(&w).map(|(&xi, &wi)| wi * f(mean + sd * xi)).sum()
}
