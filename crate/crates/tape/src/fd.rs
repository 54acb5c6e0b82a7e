//! Central finite differences, used as the independent oracle in gradient
//! tests throughout the workspace.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Fraction of coordinates whose relative error is within `tol`, treating
/// pairs whose absolute difference is below `abs_floor` as agreeing.
pub fn agreement_fraction(analytic: &[f64], numeric: &[f64], tol: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    if analytic.is_empty() {
        return 1.0;
    }
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(&a, &n)| (a - n).abs() <= abs_floor || relative_error(a, n) <= tol)
        .count();
    ok as f64 / analytic.len() as f64
}
