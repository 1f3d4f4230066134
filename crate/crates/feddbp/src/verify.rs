//! Self-check suite: finite-difference oracles, brute-force
//! reimplementations, and the property checks behind `feddbp verify`.
//!
//! Everything here recomputes expected values through an independent
//! path (numerical differentiation, full sorts, direct per-element
//! formulas) so the checks stay meaningful if the main implementations
//! change.

/// Central finite differences of a scalar function at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Gradient-check tolerance: worst [`max_mismatch`] must stay below this.
pub const GRAD_TOL: f64 = 1e-4;

/// Differences below this absolute floor pass regardless of magnitude.
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

/// Worst elementwise relative error between two gradients. The scale is
/// floored so that a difference under [`GRAD_ABS_FLOOR`] scores below
/// [`GRAD_TOL`] even when both entries are tiny.
pub fn max_mismatch(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let floor = GRAD_ABS_FLOOR / GRAD_TOL;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs()).max(floor);
            (x - y).abs() / scale
        })
        .fold(0.0, f64::max)
}
