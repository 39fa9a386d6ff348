//! Central finite-difference utilities.
//!
//! These are the independent numerical oracle used by the verification suites
//! to check every analytic gradient in the crate. They evaluate the target
//! function only through its value, never through its gradient code.

/// Central-difference gradient of `f` at `point`.
///
/// Each coordinate is perturbed by `±step` while the others are held fixed, so
/// the cost is `2 * point.len()` evaluations of `f`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Worst relative error between an analytic gradient and a numerical one.
///
/// Uses `|a - n| / max(1, |a|, |n|)` per coordinate, which behaves like an
/// absolute tolerance near zero and a relative one for large entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x, y) = x^2 + 3xy
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let point = [2.0, -1.0];
        let numeric = central_difference(f, &point, 1e-5);
        let analytic = [2.0 * point[0] + 3.0 * point[1], 3.0 * point[0]];
        assert!(max_relative_error(&analytic, &numeric) < 1e-8);
    }
}
