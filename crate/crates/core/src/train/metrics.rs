//! Per-joint 3D error and the success-frame curve.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::crop::DEFAULT_SCALE;
use crate::data::dataset::{Batch, Dataset};
use crate::geometry::{Point3D, StereoRig};
use crate::model::{BdmStage, Model, JOINT_NAMES, NUM_JOINTS, OUTPUT_DIM};

/// Success thresholds in mm: 0, 1, ..., 80.
pub const SUCCESS_THRESHOLDS_MM: std::ops::RangeInclusive<u32> = 0..=80;

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub per_joint_mm: [f64; NUM_JOINTS],
    pub mean_mm: f64,
    /// `(threshold_mm, success_pct)`; a frame succeeds when its worst joint
    /// error is at most the threshold.
    pub success: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    frames: usize,
    mean_error_mm: f64,
    joints: Vec<JointError<'a>>,
}

#[derive(Serialize)]
struct JointError<'a> {
    name: &'a str,
    mean_error_mm: f64,
}

impl MetricsReport {
    /// Builds the report from per-frame, per-joint Euclidean errors.
    pub fn from_errors(errors: &[[f64; NUM_JOINTS]]) -> Result<Self, TrainError> {
        if errors.is_empty() {
            return Err(TrainError::Invalid("cannot evaluate an empty dataset".into()));
        }
        if errors.iter().flatten().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(TrainError::Invalid("joint errors must be finite and non-negative".into()));
        }
        let n = errors.len() as f64;
        let mut per_joint_mm = [0.0; NUM_JOINTS];
        for frame in errors {
            for (acc, e) in per_joint_mm.iter_mut().zip(frame) {
                *acc += e;
            }
        }
        per_joint_mm.iter_mut().for_each(|v| *v /= n);
        let mean_mm = per_joint_mm.iter().sum::<f64>() / NUM_JOINTS as f64;
        let worst: Vec<f64> = errors.iter().map(|f| f.iter().copied().fold(0.0, f64::max)).collect();
        let success = SUCCESS_THRESHOLDS_MM
            .map(|t| {
                let t = f64::from(t);
                let ok = worst.iter().filter(|&&w| w <= t).count();
                (t, 100.0 * ok as f64 / n)
            })
            .collect();
        Ok(Self {
            frames: errors.len(),
            per_joint_mm,
            mean_mm,
            success,
        })
    }

    pub fn success_at(&self, threshold_mm: f64) -> Option<f64> {
        self.success.iter().find(|(t, _)| *t == threshold_mm).map(|&(_, p)| p)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("threshold_mm,success_pct\n");
        for (t, p) in &self.success {
            out.push_str(&format!("{t},{p}\n"));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = Summary {
            frames: self.frames,
            mean_error_mm: self.mean_mm,
            joints: JOINT_NAMES
                .iter()
                .zip(self.per_joint_mm)
                .map(|(name, mean_error_mm)| JointError { name, mean_error_mm })
                .collect(),
        };
        serde_json::to_string_pretty(&summary).expect("plain data serializes")
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path, source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, text) in [("metrics.csv", self.metrics_csv()), ("summary.json", self.summary_json())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Scores predictions against ground truth, frame by frame.
pub fn evaluate_predictions(
    predictions: &[[Point3D; NUM_JOINTS]],
    truth: &[[Point3D; NUM_JOINTS]],
) -> Result<MetricsReport, TrainError> {
    if predictions.len() != truth.len() {
        return Err(TrainError::Invalid(format!(
            "{} predictions for {} frames",
            predictions.len(),
            truth.len()
        )));
    }
    let errors: Vec<[f64; NUM_JOINTS]> = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| std::array::from_fn(|j| p[j].distance(&t[j])))
        .collect();
    MetricsReport::from_errors(&errors)
}

/// 3D predictions for every record, cropped at the largest scale and
/// triangulated in double precision from the network's normalized triplets.
pub fn predict_3d(model: &Model<f32>, rig: &StereoRig, data: &Dataset) -> Result<Vec<[Point3D; NUM_JOINTS]>, TrainError> {
    let stage = BdmStage::new(*rig);
    let mut out = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let samples = (start..end)
            .map(|i| data.sample(i, DEFAULT_SCALE))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = Batch::from_samples(&samples)?;
        let pred = model.forward_pixels(&batch.left, &batch.right)?;
        for (row, meta) in pred.data().chunks(OUTPUT_DIM).zip(&batch.metas) {
            let norm: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            out.push(stage.triangulate(&norm, meta)?);
        }
        start = end;
    }
    Ok(out)
}

/// Mean per-joint error and success curve of `model` over `data`.
pub fn evaluate(model: &Model<f32>, rig: &StereoRig, data: &Dataset) -> Result<MetricsReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Invalid("cannot evaluate an empty dataset".into()));
    }
    let truth: Vec<_> = data.records().map(|r| r.points()).collect();
    evaluate_predictions(&predict_3d(model, rig, data)?, &truth)
}
