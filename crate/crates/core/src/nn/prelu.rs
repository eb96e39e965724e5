//! Parametric ReLU with one learnable slope per channel.
//!
//! The channel axis is axis 1, so the same kernel serves `[N, C, H, W]`
//! feature maps and `[N, C]` fully connected activations.

use super::{Param, PRELU_INIT_SLOPE};
use crate::tensor::{Scalar, Tensor, TensorError};

fn layout<T: Scalar>(input: &Tensor<T>, slopes: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    if input.shape().len() < 2 {
        return Err(TensorError::Invalid {
            op: "prelu",
            msg: format!("expected at least 2 dims, got {:?}", input.shape()),
        });
    }
    let c = input.dim(1);
    slopes.expect_shape("prelu slopes", &[c])?;
    let inner: usize = input.shape()[2..].iter().product();
    Ok((input.dim(0), c, inner))
}

pub fn prelu_forward<T: Scalar>(input: &Tensor<T>, slopes: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, c, inner) = layout(input, slopes)?;
    let mut out = input.clone();
    for (block, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
        let a = slopes.data()[block % c];
        for v in chunk {
            if *v <= T::zero() {
                *v *= a;
            }
        }
    }
    Ok(out)
}

/// Accumulates the slope gradient into `g_slopes` and returns the input gradient.
pub fn prelu_backward_into<T: Scalar>(
    input: &Tensor<T>,
    slopes: &Tensor<T>,
    grad_out: &Tensor<T>,
    g_slopes: &mut Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (_, c, inner) = layout(input, slopes)?;
    grad_out.expect_shape("prelu grad_out", input.shape())?;
    g_slopes.expect_shape("prelu slope grad", &[c])?;
    let mut gi = grad_out.clone();
    for (block, (g, x)) in gi
        .data_mut()
        .chunks_exact_mut(inner)
        .zip(input.data().chunks_exact(inner))
        .enumerate()
    {
        let ch = block % c;
        let a = slopes.data()[ch];
        let mut acc = 0.0f64;
        for (gv, &xv) in g.iter_mut().zip(x) {
            if xv <= T::zero() {
                acc += gv.as_f64() * xv.as_f64();
                *gv *= a;
            }
        }
        g_slopes.data_mut()[ch] += T::of(acc);
    }
    Ok(gi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRelu<T> {
    pub slopes: Param<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            slopes: Param::constant(&[channels], T::of(PRELU_INIT_SLOPE)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        prelu_forward(x, &self.slopes.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        prelu_backward_into(x, &self.slopes.value, dy, &mut self.slopes.grad)
    }
}
