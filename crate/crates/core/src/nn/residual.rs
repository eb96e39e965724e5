//! Identity skip connection.

use crate::tensor::{Scalar, Tensor, TensorError};

pub fn residual_add<T: Scalar>(main: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let mut out = main.clone();
    out.add_assign(skip)?;
    Ok(out)
}

/// Both branches receive the upstream gradient unchanged.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}
