//! Finite-difference gradient oracle.
//!
//! Independent of the tape's reverse pass: it only reruns forward
//! evaluations, so it can referee the analytic gradients. Used by the test
//! suites; kept in the library so integration tests across crates can share
//! it.

/// Central finite differences of `f` around `x0` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = f(&x);
        x[i] = x0[i] - h;
        let down = f(&x);
        x[i] = x0[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients.
///
/// The denominator is floored at 1e-6 so that near-zero pairs compare
/// absolutely instead of blowing up.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
