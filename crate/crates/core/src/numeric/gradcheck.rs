//! Central finite differences, used as the independent oracle for the tape.

use super::matrix::Matrix;

/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate of `params`.
pub fn numerical_gradient<F>(mut f: F, params: &Matrix, eps: f64) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from dominating with
/// pure finite-difference noise.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    const FLOOR: f64 = 1e-6;
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}
