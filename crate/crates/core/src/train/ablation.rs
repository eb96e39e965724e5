//! Incremental-strategy ablation: six configurations, each adding one
//! improvement to the previous, every row trained from scratch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{finetune, pretrain, reset_momentum, MetricsReport, RunOptions, TrainError};
use crate::data::dataset::{load_dataset, read_rig, Dataset, LoadOptions};
use crate::data::Split;
use crate::model::checkpoint::save_checkpoint;
use crate::model::{Model, ModelConfig};
use crate::nn::TrainConfig;

/// Reference mean errors (mm) for the six strategies, measured at full scale
/// on data that is not available here. Reported alongside, never compared.
pub const REFERENCE_MEAN_MM: [f64; 6] = [13.6, 13.2, 12.3, 11.4, 11.2, 10.9];

pub const STRATEGIES: [&str; 6] = [
    "baseline",
    "+multi-scale training",
    "+more channels",
    "+mask images",
    "+residual",
    "+binocular distance measurement layer",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub channel_multiplier: f64,
    pub use_mask: bool,
    pub use_residual: bool,
    pub multi_scale: bool,
    pub bdm_finetune: bool,
}

impl AblationFlags {
    /// Names of the flags that differ between `self` and `other`.
    pub fn diff(&self, other: &AblationFlags) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.channel_multiplier != other.channel_multiplier {
            out.push("channel_multiplier");
        }
        if self.use_mask != other.use_mask {
            out.push("use_mask");
        }
        if self.use_residual != other.use_residual {
            out.push("use_residual");
        }
        if self.multi_scale != other.multi_scale {
            out.push("multi_scale");
        }
        if self.bdm_finetune != other.bdm_finetune {
            out.push("bdm_finetune");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: &'static str,
    pub reference_mean_mm: f64,
    pub flags: AblationFlags,
}

/// The six rows in order. The baseline uses half of `full_multiplier`.
pub fn ablation_ladder(full_multiplier: f64) -> Vec<AblationRow> {
    let mut flags = AblationFlags {
        channel_multiplier: full_multiplier / 2.0,
        use_mask: false,
        use_residual: false,
        multi_scale: false,
        bdm_finetune: false,
    };
    let mut rows = Vec::with_capacity(6);
    for (i, strategy) in STRATEGIES.into_iter().enumerate() {
        match i {
            1 => flags.multi_scale = true,
            2 => flags.channel_multiplier = full_multiplier,
            3 => flags.use_mask = true,
            4 => flags.use_residual = true,
            5 => flags.bdm_finetune = true,
            _ => {}
        }
        rows.push(AblationRow {
            strategy,
            reference_mean_mm: REFERENCE_MEAN_MM[i],
            flags,
        });
    }
    rows
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    /// Input size, seed handling and head init come from here; the ablated
    /// fields are overwritten per row.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub model_seed: u64,
    /// Cap on records per split, for quick runs.
    pub limit: Option<usize>,
}

impl AblationPlan {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            pretrain: TrainConfig::desk(),
            finetune: super::desk_finetune_config(),
            model_seed: 0,
            limit: None,
        }
    }

    pub fn row_configs(&self, row: &AblationRow) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            channel_multiplier: row.flags.channel_multiplier,
            use_mask_channel: row.flags.use_mask,
            use_residual: row.flags.use_residual,
            attach_bdm: row.flags.bdm_finetune,
            ..self.model.clone()
        };
        let train = TrainConfig {
            multi_scale: row.flags.multi_scale,
            ..self.pretrain.clone()
        };
        (model, train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    Done(MetricsReport),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub outcome: RowOutcome,
    /// Per-row output directory, when one was requested.
    pub dir: Option<PathBuf>,
}

impl AblationResult {
    pub fn mean_mm(&self) -> Option<f64> {
        match &self.outcome {
            RowOutcome::Done(m) => Some(m.mean_mm),
            RowOutcome::Failed(_) => None,
        }
    }
}

/// Directory name for row `index`, e.g. `2_more_channels`.
pub fn row_dir_name(index: usize, row: &AblationRow) -> String {
    let slug: String = row
        .strategy
        .trim_start_matches('+')
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{index}_{slug}")
}

struct Splits {
    train: Dataset,
    test: Dataset,
}

fn load_splits(dir: &Path, plan: &AblationPlan, use_mask: bool) -> Result<Splits, TrainError> {
    let load = |split| -> Result<Dataset, TrainError> {
        let mut opts = LoadOptions::new(plan.model.input_size, use_mask, Some(split));
        opts.limit = plan.limit;
        Ok(load_dataset(dir, &opts)?)
    };
    Ok(Splits {
        train: load(Split::Train)?,
        test: load(Split::Test)?,
    })
}

fn run_row(
    plan: &AblationPlan,
    row: &AblationRow,
    data_dir: &Path,
    splits: &Splits,
    out: Option<&Path>,
) -> Result<MetricsReport, TrainError> {
    let rig = read_rig(data_dir)?;
    let (model_cfg, pre_cfg) = plan.row_configs(row);
    let mut model = Model::<f32>::build(&model_cfg, plan.model_seed)?;
    let opts = RunOptions::default();
    let io = |path: &Path, source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let log = pretrain(&mut model, &pre_cfg, &splits.train, &opts)?;
    if let Some(dir) = out {
        log.write_csv(&dir.join("pretrain_log.csv"))?;
    }
    if row.flags.bdm_finetune {
        reset_momentum(&mut model);
        let ft_cfg = TrainConfig {
            multi_scale: row.flags.multi_scale,
            ..plan.finetune.clone()
        };
        let log = finetune(&mut model, &rig, &ft_cfg, &splits.train, &opts)?;
        if let Some(dir) = out {
            log.write_csv(&dir.join("finetune_log.csv"))?;
        }
    }
    let report = super::evaluate(&model, &rig, &splits.test)?;
    if let Some(dir) = out {
        report.write(dir)?;
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
    }
    Ok(report)
}

/// Trains and evaluates every row of `rows` on the dataset in `data_dir`.
/// A row that fails is recorded and the remaining rows still run.
pub fn ablation_run(plan: &AblationPlan, rows: &[AblationRow], data_dir: &Path, out_dir: Option<&Path>) -> Vec<AblationResult> {
    let mut cache: [Option<Result<Splits, String>>; 2] = [None, None];
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let dir = out_dir.map(|d| d.join(row_dir_name(i, row)));
            let slot = &mut cache[usize::from(row.flags.use_mask)];
            let splits = slot.get_or_insert_with(|| load_splits(data_dir, plan, row.flags.use_mask).map_err(|e| e.to_string()));
            let outcome = match splits {
                Ok(splits) => match run_row(plan, row, data_dir, splits, dir.as_deref()) {
                    Ok(report) => RowOutcome::Done(report),
                    Err(e) => RowOutcome::Failed(e.to_string()),
                },
                Err(msg) => RowOutcome::Failed(msg.clone()),
            };
            AblationResult { row: *row, outcome, dir }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One line per row; the reference column is never compared against.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from(
        "strategy,channel_multiplier,use_mask,use_residual,multi_scale,bdm_finetune,status,mean_error_mm,reference_mean_error_mm,reference_reproducible,run_dir\n",
    );
    for r in results {
        let f = r.row.flags;
        let (status, mean) = match &r.outcome {
            RowOutcome::Done(m) => ("ok".to_string(), format!("{:.4}", m.mean_mm)),
            RowOutcome::Failed(msg) => (format!("failed: {msg}"), String::new()),
        };
        let dir = r.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},false,{}\n",
            csv_field(r.row.strategy),
            f.channel_multiplier,
            f.use_mask,
            f.use_residual,
            f.multi_scale,
            f.bdm_finetune,
            csv_field(&status),
            mean,
            r.row.reference_mean_mm,
            csv_field(&dir),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_adds_one_flag_per_row() {
        let rows = ablation_ladder(0.25);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].flags.channel_multiplier, 0.125);
        assert!(!rows[0].flags.multi_scale && !rows[0].flags.use_mask && !rows[0].flags.use_residual && !rows[0].flags.bdm_finetune);
        for w in rows.windows(2) {
            assert_eq!(w[1].flags.diff(&w[0].flags).len(), 1, "{} -> {}", w[0].strategy, w[1].strategy);
        }
        let last = rows[5].flags;
        assert!(last.multi_scale && last.use_mask && last.use_residual && last.bdm_finetune);
        assert_eq!(last.channel_multiplier, 0.25);
    }

    #[test]
    fn missing_data_fails_every_row_without_panicking() {
        let dir = tempfile::tempdir().unwrap();
        let plan = AblationPlan::desk();
        let rows = ablation_ladder(0.25);
        let results = ablation_run(&plan, &rows, &dir.path().join("nope"), None);
        assert_eq!(results.len(), 6);
        assert!(results.iter().all(|r| matches!(r.outcome, RowOutcome::Failed(_))));
        let csv = ablation_csv(&results);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("baseline,0.125,false,false,false,false,failed"));
    }
}
