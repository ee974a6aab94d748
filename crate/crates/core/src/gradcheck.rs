//! Central finite differences for checking analytic gradients.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// First component where `|a - n| > atol + rtol * max(|a|, |n|)`, if any.
pub fn first_mismatch(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| (*a - *n).abs() > atol + rtol * a.abs().max(n.abs()))
        .map(|(i, (a, n))| (i, *a, *n))
}
