//! Central-finite-difference gradient oracle. The checker only calls the
//! supplied loss closure, so it stays independent of the reverse-mode path
//! it is used to validate.

/// d/dx_i f(x) by central differences at step `h`, one coordinate at a time.
pub fn central_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Worst relative discrepancy between two gradient vectors.
///
/// Per coordinate: `|a - b| / max(|a|, |b|, floor)`. The floor keeps
/// finite-difference roundoff on near-zero gradients from reading as a
/// large relative error.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Default step and floor used by the gradient-check suites.
pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = central_diff_gradient(&mut f, &x, FD_STEP);
        let expected = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&g, &expected, FD_FLOOR) < FD_TOLERANCE);
    }
}
