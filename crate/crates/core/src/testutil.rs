//! Implementation-independent reference computations for unit tests.

use nalgebra::DMatrix;

/// Central-difference Jacobian of `map` at `p`.
pub fn finite_difference_jacobian<F>(map: F, p: &[f64], step: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = p.len();
    let m = map(p).len();
    let mut jac = DMatrix::zeros(m, n);
    let mut q = p.to_vec();
    for j in 0..n {
        q[j] = p[j] + step;
        let plus = map(&q);
        q[j] = p[j] - step;
        let minus = map(&q);
        q[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    jac
}
