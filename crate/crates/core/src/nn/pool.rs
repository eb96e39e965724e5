//! 2x2 stride-2 max pooling.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Pooled output plus, for every output cell, the flat input index that won.
#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<PoolOutput<T>, TensorError> {
    if input.shape().len() != 4 {
        return Err(TensorError::Invalid {
            op: "maxpool2",
            msg: format!("expected a 4-d tensor, got {:?}", input.shape()),
        });
    }
    let [n, c, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "maxpool2",
            msg: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let top = base + 2 * y * w + 2 * x;
                // Row-major scan; strict comparison keeps the first maximum.
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok(PoolOutput {
        output: out,
        argmax,
    })
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2 backward",
            expected: vec![argmax.len()],
            got: grad_out.shape().to_vec(),
        });
    }
    let mut gi = Tensor::zeros(input_shape);
    let dst = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx] += g;
    }
    Ok(gi)
}
