//! Stride-1 "same" convolution (cross-correlation, no kernel flip) via im2col.

use rand::Rng;

use super::{fan_in_bound, Param};
use crate::tensor::{Scalar, Tensor, TensorError};

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "expected 4-d input and weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        });
    }
    let [n, c, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [k_out, c_w, kh, kw] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    if c_w != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![k_out, c, kh, kw],
            got: weight.shape().to_vec(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel must be square and odd, got {kh}x{kw}"),
        });
    }
    Ok((n, c, h, w, k_out, kh))
}

/// Unrolls one `[C, H, W]` image into `[C*k*k, H*W]` columns with zero padding `(k-1)/2`.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image gradient.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &g) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// `[N, C, H, W]` input, `[K, C, k, k]` weight, `[K]` bias → `[N, K, H, W]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w, k_out, k) = geometry(input, weight)?;
    bias.expect_shape("conv2d bias", &[k_out])?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, k_out, h, w]);
    let mut cols = vec![T::zero(); ckk * hw];
    for i in 0..n {
        im2col(&input.data()[i * c * hw..(i + 1) * c * hw], c, h, w, k, &mut cols);
        let dst = &mut out.data_mut()[i * k_out * hw..(i + 1) * k_out * hw];
        for (plane, &b) in dst.chunks_exact_mut(hw).zip(bias.data()) {
            plane.fill(b);
        }
        T::gemm(
            k_out,
            ckk,
            hw,
            T::one(),
            weight.data(),
            (ckk as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[weight.dim(0)]);
    let gi = conv2d_backward_into(input, weight, grad_out, &mut gw, &mut gb)?;
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// Accumulates weight and bias gradients into `gw`, `gb`; returns the input gradient.
pub fn conv2d_backward_into<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w, k_out, k) = geometry(input, weight)?;
    grad_out.expect_shape("conv2d grad_out", &[n, k_out, h, w])?;
    gw.expect_shape("conv2d weight grad", weight.shape())?;
    gb.expect_shape("conv2d bias grad", &[k_out])?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut gi = Tensor::zeros(input.shape());
    let mut cols = vec![T::zero(); ckk * hw];
    let mut gcols = vec![T::zero(); ckk * hw];
    for i in 0..n {
        let dy = &grad_out.data()[i * k_out * hw..(i + 1) * k_out * hw];
        im2col(&input.data()[i * c * hw..(i + 1) * c * hw], c, h, w, k, &mut cols);
        // dW += dy * cols^T
        T::gemm(
            k_out,
            hw,
            ckk,
            T::one(),
            dy,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::one(),
            gw.data_mut(),
            (ckk as isize, 1),
        );
        for (g, plane) in gb.data_mut().iter_mut().zip(dy.chunks_exact(hw)) {
            *g += T::of(plane.iter().map(|v| v.as_f64()).sum::<f64>());
        }
        // dcols = W^T * dy
        T::gemm(
            ckk,
            k_out,
            hw,
            T::one(),
            weight.data(),
            (1, ckk as isize),
            dy,
            (hw as isize, 1),
            T::zero(),
            &mut gcols,
            (hw as isize, 1),
        );
        col2im(&gcols, c, h, w, k, &mut gi.data_mut()[i * c * hw..(i + 1) * c * hw]);
    }
    Ok(gi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(in_ch * kernel * kernel);
        Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        conv2d_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        conv2d_backward_into(
            x,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
        )
    }
}
