//! Momentum SGD with L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Param;
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    pub seed: u64,
    /// Sample a crop size per record and epoch instead of always using the largest.
    pub multi_scale: bool,
    /// Write an intermediate checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters with the schedule compressed 100x.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr0: 0.005,
            lr_decay_factor: 0.1,
            lr_decay_every: 2000,
            momentum: 0.9,
            weight_decay: 0.0005,
            max_iters: 6000,
            seed: 0,
            multi_scale: true,
            checkpoint_every: 0,
        }
    }

    /// Full-scale hyperparameters.
    pub fn full() -> Self {
        Self {
            batch_size: 128,
            lr_decay_every: 200_000,
            max_iters: 600_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.lr_decay_every == 0 {
            return Err("lr_decay_every must be at least 1".into());
        }
        Ok(())
    }
}

/// `lr0 * factor^floor(iter / every)`.
pub fn learning_rate(config: &TrainConfig, iter: u64) -> f64 {
    let steps = (iter / config.lr_decay_every.max(1)) as i32;
    config.lr0 * config.lr_decay_factor.powi(steps)
}

/// One update of every parameter: `v = mu v + g + wd p`, `p -= lr v`.
///
/// Returns the learning rate that was applied.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    config: &TrainConfig,
    iter: u64,
) -> Result<f64, TensorError> {
    let lr = learning_rate(config, iter);
    let (lr_t, mu, wd) = (T::of(lr), T::of(config.momentum), T::of(config.weight_decay));
    for p in params.iter_mut() {
        let Param {
            value,
            grad,
            velocity,
        } = &mut **p;
        grad.expect_shape("sgd_step", value.shape())?;
        velocity.expect_shape("sgd_step", value.shape())?;
        for ((w, &g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut())
        {
            *v = mu * *v + g + wd * *w;
            *w -= lr_t * *v;
        }
    }
    Ok(lr)
}
