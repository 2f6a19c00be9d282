//! Central finite-difference helpers for verifying analytic gradients.

/// Central difference `(f(x0+h) - f(x0-h)) / 2h`.
///
/// `f` receives the coordinate value to evaluate at and is responsible for
/// writing it into whatever structure the objective reads; a final call with
/// `x0` restores the original state.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    let fp = f(x0 + h);
    let fm = f(x0 - h);
    f(x0);
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare
/// absolutely instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
