//! Central finite-difference utilities for validating analytic gradients.

use crate::tensor::Tensor;

/// Finite-difference gradient of a scalar function w.r.t. `inputs[which]`,
/// central differences with step `h`.
pub fn finite_diff(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    h: f64,
) -> Tensor {
    let mut grad = Tensor::zeros(inputs[which].shape());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..grad.len() {
        let base = work[which].data()[i];
        work[which].data_mut()[i] = base + h;
        let plus = f(&work);
        work[which].data_mut()[i] = base - h;
        let minus = f(&work);
        work[which].data_mut()[i] = base;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative discrepancy between two gradients:
/// ||a - b|| / max(||a||, ||b||, floor).
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}
