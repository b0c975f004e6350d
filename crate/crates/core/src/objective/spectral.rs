//! Extreme eigenvalues of symmetric positive semidefinite operators.

/// Largest eigenvalue of the symmetric PSD operator `apply` by power
/// iteration with Rayleigh-quotient estimates.
///
/// Stops once the residual `‖Av − ρv‖` drops below `1e-12·ρ`, which bounds
/// the eigenvalue error by the same amount.
pub fn largest_eigenvalue(dim: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
    const MAX_ITERS: usize = 500_000;
    if dim == 0 {
        return 0.0;
    }
    // Deterministic start with no symmetry that could be orthogonal to the top eigenvector.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * ((i * 7919) % 101) as f64 / 101.0).collect();
    normalize(&mut v);
    let mut lambda = 0.0f64;
    for _ in 0..MAX_ITERS {
        let w = apply(&v);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let residual = v.iter().zip(&w).map(|(a, b)| (b - lambda * a).powi(2)).sum::<f64>().sqrt();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        if residual <= 1e-12 * lambda.abs() {
            break;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}
