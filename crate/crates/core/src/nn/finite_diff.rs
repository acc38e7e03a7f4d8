use crate::tensor::Tensor;

/// Denominator floor for element-wise relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, epsilon: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    grad
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
