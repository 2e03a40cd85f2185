//! Central finite differences for gradient verification.
//!
//! Treats the function under test as a black box over a flat coordinate
//! vector, so it stays independent of the tape implementation it checks.

/// Central-difference gradient with a relative step per coordinate:
/// h_i = step * (1 + |x_i|).
pub fn gradient<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let h = step * (1.0 + point[i].abs());
        x[i] = point[i] + h;
        let fp = f(&x);
        x[i] = point[i] - h;
        let fm = f(&x);
        x[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Max relative error between two gradient vectors, with an absolute floor
/// so near-zero coordinates do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor_handles_zeros() {
        assert!(max_rel_error(&[0.0], &[1e-12], 1.0) < 1e-11);
    }
}
