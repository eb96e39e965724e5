use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use tsbnet::config::KeyValues;
use tsbnet::data::dataset::{read_manifest, read_rig};
use tsbnet::data::{derive_seed, generate_dataset, load_dataset, GenerateOptions, LoadOptions, Split};
use tsbnet::gradient_suite::{run_target, Precision, Target};
use tsbnet::model::checkpoint::{load_checkpoint, save_checkpoint_with, SaveOptions};
use tsbnet::model::{Model, ModelConfig};
use tsbnet::nn::TrainConfig;
use tsbnet::train::ablation::{ablation_csv, ablation_ladder, ablation_run, AblationPlan, RowOutcome};
use tsbnet::train::{
    desk_finetune_config, evaluate, evaluate_predictions, finetune, pretrain, reset_momentum, Phase, RunOptions,
};
use tsbnet::StereoRig;

use crate::error::CliError;
use crate::manifest::{write_atomic, RunManifest};
use crate::{Cli, Command, PhaseArg, PrecisionArg, SplitArg};

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn read_config(path: Option<&Path>, sections: &[&str]) -> Result<KeyValues, CliError> {
    let Some(path) = path else {
        return Ok(KeyValues::new());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let kv = KeyValues::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(k) = kv.keys().find(|k| !sections.iter().any(|s| k.starts_with(&format!("{s}.")))) {
        return Err(CliError::Usage(format!(
            "{}: key `{k}` is outside the accepted sections ({})",
            path.display(),
            sections.join(", ")
        )));
    }
    Ok(kv)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> Result<(), CliError> {
    write_atomic(&dir.join(name), text.as_bytes())?;
    manifest.output(name);
    Ok(())
}

fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, "model-init", 0)
}

pub fn gen_data(
    count: usize,
    split: SplitArg,
    test_count: usize,
    seed: u64,
    out: &Path,
    rig_file: Option<&Path>,
    threads: usize,
) -> Result<(), CliError> {
    if split == SplitArg::Test && test_count > 0 {
        return Err(CliError::Usage("--test-count only applies to --split train".into()));
    }
    let mut manifest = RunManifest::start("gen-data", seed);
    let mut rig = StereoRig::default();
    if let Some(path) = rig_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        rig.apply_kv(&KeyValues::parse(&text)?)?;
        manifest.input("rig", path);
    }
    let (train, test) = match split {
        SplitArg::Train => (count, test_count),
        SplitArg::Test => (0, count),
    };
    let opts = GenerateOptions {
        train,
        test,
        seed,
        rig,
        threads,
        ..Default::default()
    };
    create_dir(out)?;
    let records = generate_dataset(out, &opts)?;

    let mut config = rig.to_kv().with_prefix("rig");
    config.set("gen.train", train);
    config.set("gen.test", test);
    config.set("gen.seed", seed);
    manifest.set_config(&config);
    for name in ["rig.json", "manifest.jsonl", "images/"] {
        manifest.output(name);
    }
    manifest.finish(out)?;
    println!("{} {} records", out.join("manifest.jsonl").display(), records.len());
    Ok(())
}

pub struct TrainArgs {
    pub phase: PhaseArg,
    pub data: PathBuf,
    pub init: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub iters: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub limit: Option<usize>,
}

/// Defaults, then the config file, then flags.
fn resolve_train(base: TrainConfig, file: &KeyValues, a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = base;
    cfg.apply_kv(file)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let phase = match a.phase {
        PhaseArg::Pretrain => Phase::Pretrain,
        PhaseArg::Finetune => Phase::Finetune,
    };
    if phase == Phase::Finetune && a.init.is_none() {
        return Err(CliError::Usage("finetuning needs a starting checkpoint (--init)".into()));
    }
    let file = read_config(a.config.as_deref(), &["model", "train"])?;
    let model_keys = file.section("model");
    if a.init.is_some() && !model_keys.is_empty() {
        return Err(CliError::Usage("model.* keys conflict with --init; the checkpoint fixes the architecture".into()));
    }
    let base = match phase {
        Phase::Pretrain => TrainConfig::desk(),
        Phase::Finetune => desk_finetune_config(),
    };
    let cfg = resolve_train(base, &file.section("train"), &a)?;
    let mut manifest = RunManifest::start("train", cfg.seed);

    let mut model = match &a.init {
        Some(path) => {
            manifest.input("init", path);
            load_checkpoint(path)?.model
        }
        None => {
            let mut mc = ModelConfig::desk();
            mc.apply_kv(&model_keys)?;
            Model::<f32>::build(&mc, model_seed(cfg.seed)).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let rig = read_rig(&a.data)?;
    let mc = model.config().clone();
    let mut load = LoadOptions::new(mc.input_size, mc.use_mask_channel, Some(Split::Train));
    load.limit = a.limit;
    let data = load_dataset(&a.data, &load)?;
    manifest.input("data", &a.data);
    create_dir(&a.out)?;

    let mut provenance = rig.to_kv().with_prefix("rig");
    provenance.set("data", a.data.display());
    provenance.set("seed", cfg.seed);
    let opts = RunOptions {
        checkpoint_dir: Some(a.out.clone()),
        provenance: provenance.clone(),
    };
    let log = match phase {
        Phase::Pretrain => pretrain(&mut model, &cfg, &data, &opts)?,
        Phase::Finetune => {
            reset_momentum(&mut model);
            finetune(&mut model, &rig, &cfg, &data, &opts)?
        }
    };

    provenance.set("phase", phase);
    provenance.set("iter", cfg.max_iters);
    save_checkpoint_with(
        &model,
        &a.out.join("model.ckpt"),
        &SaveOptions {
            momentum: true,
            provenance,
        },
    )?;
    manifest.output("model.ckpt");
    if cfg.checkpoint_every > 0 {
        let mut k = cfg.checkpoint_every;
        while k < cfg.max_iters {
            manifest.output(format!("{phase}_iter{k}.ckpt"));
            k += cfg.checkpoint_every;
        }
    }
    write_file(&a.out, "train_log.csv", &log.to_csv(), &mut manifest)?;

    let mut config = mc.to_kv().with_prefix("model");
    config.merge(&cfg.to_kv().with_prefix("train"));
    config.merge(&rig.to_kv().with_prefix("rig"));
    config.set("phase", phase);
    manifest.set_config(&config);
    manifest.finish(&a.out)?;
    let (start, end) = log.smoothed_ends(100).unwrap_or((f64::NAN, f64::NAN));
    println!("{phase}: {} iterations, loss {start:.6} -> {end:.6}", log.rows.len());
    Ok(())
}

fn checkpoint_rig(provenance: &KeyValues) -> Result<Option<StereoRig>, CliError> {
    let section = provenance.section("rig");
    if section.is_empty() {
        return Ok(None);
    }
    let mut rig = StereoRig::default();
    rig.apply_kv(&section)
        .map_err(|e| CliError::Input(format!("checkpoint rig provenance: {e}")))?;
    Ok(Some(rig))
}

pub fn eval(ckpt: Option<&Path>, data_dir: &Path, out: &Path, split: SplitArg, inject_truth: bool) -> Result<(), CliError> {
    let split = split_of(split);
    let mut manifest = RunManifest::start("eval", 0);
    let rig = read_rig(data_dir)?;
    manifest.input("data", data_dir);
    let mut config = rig.to_kv().with_prefix("rig");
    config.set("eval.split", split);
    config.set("eval.inject_truth", inject_truth);

    let report = if inject_truth {
        let truth: Vec<_> = read_manifest(data_dir)?
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.points())
            .collect();
        if truth.is_empty() {
            return Err(CliError::Usage(format!("no {split} records in {}", data_dir.display())));
        }
        evaluate_predictions(&truth, &truth)?
    } else {
        let path = ckpt.expect("clap requires --ckpt without --inject-truth");
        let ck = load_checkpoint(path)?;
        manifest.input("ckpt", path);
        if let Some(trained) = checkpoint_rig(&ck.provenance)? {
            if trained != rig {
                return Err(CliError::Usage(format!(
                    "checkpoint was trained with rig {trained:?} but the dataset uses {rig:?}"
                )));
            }
        }
        let mc = ck.model.config();
        let data = load_dataset(data_dir, &LoadOptions::new(mc.input_size, mc.use_mask_channel, Some(split)))?;
        config.merge(&mc.to_kv().with_prefix("model"));
        evaluate(&ck.model, &rig, &data)?
    };
    report.write(out)?;
    manifest.output("metrics.csv");
    manifest.output("summary.json");
    manifest.set_config(&config);
    manifest.finish(out)?;
    println!(
        "{} frames, mean error {:.3} mm, success within 20 mm {:.1}%",
        report.frames,
        report.mean_mm,
        report.success_at(20.0).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn gradcheck(target: &str, trials: usize, seed: u64, precision: PrecisionArg, out: Option<&Path>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let targets: Vec<Target> = match target {
        "all" => Target::ALL.to_vec(),
        name => vec![name.parse().map_err(CliError::Usage)?],
    };
    let precisions: &[Precision] = match precision {
        PrecisionArg::F32 => &[Precision::Single],
        PrecisionArg::F64 => &[Precision::Double],
        PrecisionArg::Both => &[Precision::Double, Precision::Single],
    };
    let mut manifest = RunManifest::start("gradcheck", seed);
    let mut csv = String::from("target,precision,trials,worst_rel_error,tolerance,tensor,index,analytic,numeric,passed\n");
    let mut failures = Vec::new();
    for &t in &targets {
        for &p in precisions {
            let r = run_target(t, p, trials, seed).map_err(|e| CliError::Numerical(format!("{t}/{}: {e}", p.name())))?;
            let w = r.worst;
            let line = format!(
                "{t} {} worst {:.3e} (tolerance {:.0e}) at {}[{}]: analytic {:.9e} numeric {:.9e}",
                p.name(),
                w.max_rel_error,
                r.tolerance(),
                r.tensor,
                w.worst_index,
                w.analytic,
                w.numeric
            );
            println!("{} {line}", if r.passed() { "ok  " } else { "FAIL" });
            if !r.passed() {
                failures.push(line);
            }
            csv.push_str(&format!(
                "{t},{},{trials},{:e},{:e},{},{},{:e},{:e},{}\n",
                p.name(),
                w.max_rel_error,
                r.tolerance(),
                r.tensor,
                w.worst_index,
                w.analytic,
                w.numeric,
                r.passed()
            ));
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(dir, "gradcheck.csv", &csv, &mut manifest)?;
        let mut config = KeyValues::new();
        config.set("gradcheck.target", target);
        config.set("gradcheck.trials", trials);
        config.set("gradcheck.precision", format!("{precision:?}").to_lowercase());
        manifest.set_config(&config);
        manifest.finish(dir)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failures.join("\n")))
    }
}

pub struct AblateArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub pretrain_iters: Option<u64>,
    pub finetune_iters: Option<u64>,
    pub limit: Option<usize>,
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let file = read_config(a.config.as_deref(), &["model", "pretrain", "finetune"])?;
    let mut plan = AblationPlan::desk();
    plan.model.apply_kv(&file.section("model"))?;
    plan.pretrain.apply_kv(&file.section("pretrain"))?;
    plan.finetune.apply_kv(&file.section("finetune"))?;
    if let Some(seed) = a.seed {
        plan.pretrain.seed = seed;
        plan.finetune.seed = seed;
    }
    if let Some(n) = a.pretrain_iters {
        plan.pretrain.max_iters = n;
    }
    if let Some(n) = a.finetune_iters {
        plan.finetune.max_iters = n;
    }
    plan.model_seed = model_seed(plan.pretrain.seed);
    plan.limit = a.limit;
    // Fail early with an I/O code rather than six identical row failures.
    let rig = read_rig(&a.data)?;
    create_dir(&a.out)?;

    let mut manifest = RunManifest::start("ablate", plan.pretrain.seed);
    manifest.input("data", &a.data);
    let rows = ablation_ladder(plan.model.channel_multiplier);
    let mut results = ablation_run(&plan, &rows, &a.data, Some(&a.out));

    for r in &mut results {
        let Some(dir) = r.dir.take() else { continue };
        create_dir(&dir)?;
        let mut row_manifest = RunManifest::start("ablate-row", plan.pretrain.seed);
        row_manifest.started_unix_ms = manifest.started_unix_ms;
        row_manifest.input("data", &a.data);
        let (mc, pre) = plan.row_configs(&r.row);
        let mut config = mc.to_kv().with_prefix("model");
        config.merge(&pre.to_kv().with_prefix("pretrain"));
        if r.row.flags.bdm_finetune {
            let ft = TrainConfig {
                multi_scale: r.row.flags.multi_scale,
                ..plan.finetune.clone()
            };
            config.merge(&ft.to_kv().with_prefix("finetune"));
        }
        config.merge(&rig.to_kv().with_prefix("rig"));
        config.set("strategy", r.row.strategy);
        row_manifest.set_config(&config);
        if let RowOutcome::Done(_) = r.outcome {
            for name in ["pretrain_log.csv", "metrics.csv", "summary.json", "model.ckpt"] {
                row_manifest.output(name);
            }
            if r.row.flags.bdm_finetune {
                row_manifest.output("finetune_log.csv");
            }
        }
        row_manifest.finish(&dir)?;
        let rel = dir.strip_prefix(&a.out).map(Path::to_path_buf).unwrap_or(dir);
        manifest.output(format!("{}/run_manifest.json", rel.display()));
        r.dir = Some(rel);
    }
    write_file(&a.out, "ablation.csv", &ablation_csv(&results), &mut manifest)?;

    let mut config = plan.model.to_kv().with_prefix("model");
    config.merge(&plan.pretrain.to_kv().with_prefix("pretrain"));
    config.merge(&plan.finetune.to_kv().with_prefix("finetune"));
    config.set("model_seed", plan.model_seed);
    if let Some(n) = plan.limit {
        config.set("limit", n);
    }
    manifest.set_config(&config);
    manifest.finish(&a.out)?;

    let mut failed = Vec::new();
    for r in &results {
        match &r.outcome {
            RowOutcome::Done(m) => println!(
                "{:<40} {:>8.3} mm  (reference {:.1} mm)",
                r.row.strategy, m.mean_mm, r.row.reference_mean_mm
            ),
            RowOutcome::Failed(msg) => {
                println!("{:<40} failed: {msg}", r.row.strategy);
                failed.push(format!("{}: {msg}", r.row.strategy));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} ablation row(s) failed:\n{}", failed.len(), failed.join("\n"))))
    }
}

pub fn rerun(path: &Path) -> Result<(), CliError> {
    let m = RunManifest::read(path)?;
    let cli = Cli::try_parse_from(&m.argv).map_err(|e| CliError::Usage(format!("recorded arguments: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(CliError::Usage("a rerun manifest cannot point at another rerun".into()));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::io(&m.cwd, e))?;
    crate::manifest::replay_argv(m.argv);
    crate::run(cli)
}
