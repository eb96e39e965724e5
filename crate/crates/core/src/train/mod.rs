//! Two-phase training, evaluation and the ablation harness.
//!
//! Phase one regresses crop-normalized pixel triplets with the triangulation
//! stage detached. Phase two attaches it and trains on metric 3D targets.

pub mod ablation;
pub mod metrics;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::config::KeyValues;
use crate::data::dataset::{Batch, Dataset};
use crate::data::{stream_rng, DataError};
use crate::geometry::StereoRig;
use crate::model::checkpoint::{save_checkpoint_with, CheckpointError, SaveOptions};
use crate::model::{BdmStage, Model, ModelError};
use crate::nn::{learning_rate, mse_loss, sgd_step, TrainConfig};
use crate::tensor::TensorError;

pub use metrics::{evaluate, evaluate_predictions, predict_3d, MetricsReport, SUCCESS_THRESHOLDS_MM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value at iteration {iter} (lr {lr:e}, loss {loss}, grad norm {grad_norm})")]
    NonFinite { iter: u64, lr: f64, loss: f64, grad_norm: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    /// Finetuning trains through the triangulation stage.
    pub fn attach_bdm(self) -> bool {
        self == Phase::Finetune
    }

    /// Which label the phase regresses.
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "label_norm",
            Phase::Finetune => "label_3d",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(TrainError::Invalid(format!("unknown phase `{other}`"))),
        }
    }
}

/// Finetuning defaults for the desk configuration. Gradients reaching the
/// network through the triangulation stage are several orders of magnitude
/// larger than in pretraining, so the step size is scaled down accordingly.
pub fn desk_finetune_config() -> TrainConfig {
    TrainConfig {
        lr0: 1e-8,
        max_iters: 1000,
        lr_decay_every: 100_000,
        ..TrainConfig::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", r.iter, r.lr, r.loss, r.grad_norm));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Mean loss over the first and over the last `window` iterations.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.rows.len());
        if w == 0 {
            return None;
        }
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[self.rows.len() - w..])))
    }
}

/// Side outputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where periodic checkpoints go (`<phase>_iter<N>.ckpt`); none when unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub provenance: KeyValues,
}

/// Per-epoch shuffled batches with per-epoch crop scales.
struct BatchOrder {
    seed: u64,
    batch: usize,
    multi_scale: bool,
    epoch: u64,
    order: Vec<usize>,
    scales: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(data: &Dataset, cfg: &TrainConfig) -> Self {
        let mut b = Self {
            seed: cfg.seed,
            batch: cfg.batch_size.min(data.len()),
            multi_scale: cfg.multi_scale,
            epoch: 0,
            order: Vec::new(),
            scales: Vec::new(),
            pos: 0,
        };
        b.start_epoch(data, 0);
        b
    }

    fn start_epoch(&mut self, data: &Dataset, epoch: u64) {
        self.epoch = epoch;
        self.order = (0..data.len()).collect();
        self.order.shuffle(&mut stream_rng(self.seed, "shuffle", epoch));
        self.scales = data.epoch_scales(epoch, self.seed, self.multi_scale);
        self.pos = 0;
    }

    fn next(&mut self, data: &Dataset) -> Result<Batch, TrainError> {
        if self.pos >= self.order.len() {
            self.start_epoch(data, self.epoch + 1);
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let samples = self.order[self.pos..end]
            .iter()
            .map(|&i| data.sample(i, self.scales[i]))
            .collect::<Result<Vec<_>, _>>()?;
        self.pos = end;
        Ok(Batch::from_samples(&samples)?)
    }
}

fn check_inputs(model: &Model<f32>, cfg: &TrainConfig, data: &Dataset) -> Result<(), TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if data.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    let mc = model.config();
    if mc.input_size != data.input_size || mc.in_channels() != data.channels() {
        return Err(TrainError::Invalid(format!(
            "model expects {} channel(s) at {}px, dataset provides {} at {}px",
            mc.in_channels(),
            mc.input_size,
            data.channels(),
            data.input_size
        )));
    }
    Ok(())
}

fn run_phase(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    stage: Option<&BdmStage>,
    opts: &RunOptions,
) -> Result<TrainLog, TrainError> {
    check_inputs(model, cfg, data)?;
    let phase = if stage.is_some() { Phase::Finetune } else { Phase::Pretrain };
    model.set_attach_bdm(phase.attach_bdm());
    let mut order = BatchOrder::new(data, cfg);
    let mut log = TrainLog::default();
    for iter in 0..cfg.max_iters {
        let batch = order.next(data)?;
        model.zero_grad();
        let loss = match stage {
            None => {
                let (pred, trace) = model.forward_traced(&batch.left, &batch.right)?;
                let (loss, g) = mse_loss(&pred, &batch.label_norm)?;
                if loss.is_finite() {
                    model.backward(&trace, &g)?;
                }
                loss
            }
            Some(stage) => {
                let (pred, trace, bdm) = model.forward_3d_traced(stage, &batch.metas, &batch.left, &batch.right)?;
                let (loss, g) = mse_loss(&pred, &batch.label_3d)?;
                if loss.is_finite() {
                    model.backward_3d(stage, &trace, &bdm, &g)?;
                }
                loss
            }
        };
        let lr = learning_rate(cfg, iter);
        let grad_norm = if loss.is_finite() { model.grad_norm() } else { f64::NAN };
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                iter,
                lr,
                loss,
                grad_norm,
            });
        }
        let mut params: Vec<_> = model.named_params_mut().into_iter().map(|(_, p)| p).collect();
        sgd_step(&mut params, cfg, iter)?;
        log.rows.push(LogRow {
            iter,
            lr,
            loss,
            grad_norm,
        });
        let done = iter + 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iters {
                let mut provenance = opts.provenance.clone();
                provenance.set("phase", phase);
                provenance.set("iter", done);
                save_checkpoint_with(
                    model,
                    &dir.join(format!("{phase}_iter{done}.ckpt")),
                    &SaveOptions {
                        momentum: true,
                        provenance,
                    },
                )?;
            }
        }
    }
    Ok(log)
}

/// Phase one: MSE between the network output and the crop-normalized labels.
pub fn pretrain(model: &mut Model<f32>, cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<TrainLog, TrainError> {
    run_phase(model, cfg, data, None, opts)
}

/// Phase two: MSE in mm² between the triangulated output and the 3D labels.
/// Uses the clamping disparity guard.
pub fn finetune(
    model: &mut Model<f32>,
    rig: &StereoRig,
    cfg: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<TrainLog, TrainError> {
    rig.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
    run_phase(model, cfg, data, Some(&BdmStage::new(*rig)), opts)
}

/// Clears momentum buffers, e.g. before switching phase.
pub fn reset_momentum(model: &mut Model<f32>) {
    for (_, p) in model.named_params_mut() {
        p.velocity.fill(0.0);
    }
}
