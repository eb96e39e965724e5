//! Mean squared error.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Returns the mean of squared differences and its gradient `2 (pred - label) / (N D)`.
///
/// The loss is accumulated in double precision regardless of `T`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<(f64, Tensor<T>), TensorError> {
    label.expect_shape("mse_loss", pred.shape())?;
    let count = pred.len() as f64;
    let scale = 2.0 / count;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, &p), &l) in grad.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        let diff = p.as_f64() - l.as_f64();
        total += diff * diff;
        *g = T::of(scale * diff);
    }
    Ok((total / count, grad))
}
