//! Oracles shared by unit tests.

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = f(&p);
            p[i] = x[i] - eps;
            let dn = f(&p);
            p[i] = x[i];
            (up - dn) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
