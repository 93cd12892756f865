//! Finite-difference gradient oracle.
//!
//! Test support: everything here evaluates functions forward-only, so it is
//! independent of the tape's backward pass it is used to check.

/// Central-difference gradient of a scalar function at `theta`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point);
        point[i] = orig - step;
        let minus = f(&point);
        point[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `|a − b| / max(1, |a|, |b|)`, the normalized error used by all gradient
/// checks; the `1` floor keeps near-zero gradients from inflating the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let theta = vec![1.0, -2.0, 0.5];
        let g = finite_difference_gradient(f, &theta, 1e-5);
        let expected = [2.0, -4.0, 1.0];
        assert!(max_relative_error(&expected, &g) < 1e-9);
    }
}
