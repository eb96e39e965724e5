//! Fully connected layer: `y = x W^T + b`.

use rand::Rng;

use super::{fan_in_bound, Param};
use crate::tensor::{Scalar, Tensor, TensorError};

fn dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    if input.shape().len() != 2 || weight.shape().len() != 2 || input.dim(1) != weight.dim(1) {
        return Err(TensorError::ShapeMismatch {
            op: "fully_connected",
            expected: vec![input.dim(0), weight.shape().get(1).copied().unwrap_or(0)],
            got: input.shape().to_vec(),
        });
    }
    Ok((input.dim(0), input.dim(1), weight.dim(0)))
}

/// `[N, D]` input, `[M, D]` weight, `[M]` bias → `[N, M]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, d, m) = dims(input, weight)?;
    bias.expect_shape("fully_connected bias", &[m])?;
    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_exact_mut(m) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        d,
        m,
        T::one(),
        input.data(),
        (d as isize, 1),
        weight.data(),
        (1, d as isize),
        T::one(),
        out.data_mut(),
        (m as isize, 1),
    );
    Ok(out)
}

/// Accumulates into `gw`, `gb` and returns the input gradient.
pub fn linear_backward_into<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, d, m) = dims(input, weight)?;
    grad_out.expect_shape("fully_connected grad_out", &[n, m])?;
    gw.expect_shape("fully_connected weight grad", &[m, d])?;
    gb.expect_shape("fully_connected bias grad", &[m])?;
    T::gemm(
        m,
        n,
        d,
        T::one(),
        grad_out.data(),
        (1, m as isize),
        input.data(),
        (d as isize, 1),
        T::one(),
        gw.data_mut(),
        (d as isize, 1),
    );
    for row in grad_out.data().chunks_exact(m) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut gi = Tensor::zeros(&[n, d]);
    T::gemm(
        n,
        m,
        d,
        T::one(),
        grad_out.data(),
        (m as isize, 1),
        weight.data(),
        (d as isize, 1),
        T::zero(),
        gi.data_mut(),
        (d as isize, 1),
    );
    Ok(gi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::uniform(&[out_dim, in_dim], fan_in_bound(in_dim), rng),
            bias: Param::zeros(&[out_dim]),
        }
    }

    /// All-zero weights and biases (used for the regression head).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_dim, in_dim]),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        linear_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        linear_backward_into(x, &self.weight.value, dy, &mut self.weight.grad, &mut self.bias.grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn identity_and_zero_input() {
        let x = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32 - 5.0);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![0.5f32, -1.0]).unwrap();
        let y = linear_forward(&Tensor::zeros(&[3, 4]), &Tensor::full(&[2, 4], 2.0), &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4])).is_err());
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[3])).is_err());
    }
}
