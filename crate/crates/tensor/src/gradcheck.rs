//! Central finite differences for checking analytic gradients.

use ndarray::ArrayD;

/// Numerical gradient of scalar `f` at `x` by central differences.
pub fn numeric_grad(f: impl Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut probe = x.clone();
    let mut out = ArrayD::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        out.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// Largest elementwise relative error, with `floor` guarding tiny magnitudes.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
