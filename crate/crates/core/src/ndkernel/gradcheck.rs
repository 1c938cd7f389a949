//! Central finite-difference helpers used by gradient tests.

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Central-difference slope of `eval` around 0: `eval(delta)` must
/// recompute the scalar with one coordinate shifted by `delta`.
pub fn central_diff(mut eval: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Relative agreement test between an analytic and a numeric derivative.
/// Near-zero pairs compare absolutely so finite-difference noise on flat
/// directions does not fail the check.
pub fn agree(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= rel_tol * analytic.abs().max(numeric.abs()) || diff <= 1e-8
}
