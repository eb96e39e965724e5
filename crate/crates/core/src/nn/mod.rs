//! Layer kernels with hand-written backward passes.
//!
//! Every kernel comes as a pair of free functions (`*_forward`, `*_backward`)
//! operating on plain tensors, plus a thin layer struct owning [`Param`]s
//! whose `backward` accumulates into the parameter gradients. Accumulation
//! (rather than overwrite) is what lets one parameter set serve both image
//! streams.

pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod prelu;
pub mod residual;
pub mod sgd;

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

pub use conv::Conv2d;
pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckError, GradCheckOptions, GradCheckReport};
pub use linear::Linear;
pub use loss::mse_loss;
pub use pool::{maxpool2_backward, maxpool2_forward};
pub use prelu::PRelu;
pub use residual::{residual_add, residual_add_backward};
pub use sgd::{learning_rate, sgd_step, TrainConfig};

/// A learnable tensor together with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn constant(shape: &[usize], v: T) -> Self {
        Self::new(Tensor::full(shape, v))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(Tensor::from_fn(shape, |_| {
            T::of(rng.random_range(-bound..=bound))
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            velocity: self.velocity.cast(),
        }
    }
}

/// Initial PReLU slope.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Fan-in scaled uniform bound for layers followed by a PReLU with the initial slope.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    let a = PRELU_INIT_SLOPE;
    (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt()
}
