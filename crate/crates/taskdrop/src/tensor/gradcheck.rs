//! Central-difference gradient checking.
//!
//! The tape's gradient rules are verified against numeric differentiation
//! of the forward pass alone, so the check shares no code with the code it
//! checks. With 64-bit floats and `h = 1e-6` the truncation and rounding
//! errors both sit far below the `1e-4` relative tolerance the test suite
//! enforces.

/// Numeric gradient of `f` at `x`: entry `i` is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Worst relative disagreement between two gradient vectors. Each entry is
/// scored as `|a - b| / max(|a|, |b|, 1e-4)`, so near-zero entries are
/// compared absolutely at a matching scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / f64::max(1e-4, f64::max(a.abs(), b.abs())))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_recovers_polynomial_gradient() {
        // f(x) = x0^2 + 3 x1, df = [2 x0, 3].
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_difference(f, &[2.0, -1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_aware() {
        assert!(max_relative_error(&[1000.0], &[1000.1]) < 1.1e-4);
        assert!(max_relative_error(&[0.0], &[1e-9]) < 1e-4);
        assert!(max_relative_error(&[1.0], &[1.1]) > 0.09);
    }
}
