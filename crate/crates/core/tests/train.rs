use std::path::Path;

use proptest::prelude::*;
use tsbnet::data::*;
use tsbnet::geometry::StereoRig;
use tsbnet::model::checkpoint::load_checkpoint;
use tsbnet::model::{Model, ModelConfig, NUM_JOINTS};
use tsbnet::nn::TrainConfig;
use tsbnet::train::*;
use tsbnet::Point3D;

fn dataset(dir: &Path, n: usize, seed: u64) -> Dataset {
    generate_dataset(dir, &GenerateOptions { train: n, test: 0, seed, ..Default::default() }).unwrap();
    load_dataset(dir, &LoadOptions::new(16, true, None)).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channel_multiplier: 0.125,
        input_size: 16,
        ..ModelConfig::desk()
    }
}

fn short(iters: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_iters: iters,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_bit_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 10, 2);
    let run = || {
        let mut m = Model::<f32>::build(&small_model(), 3).unwrap();
        let log = pretrain(&mut m, &short(12), &data, &RunOptions::default()).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    let bits = |l: &TrainLog| l.rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&l1), bits(&l2));
}

#[test]
fn first_loss_of_a_zero_head_is_the_mean_squared_label() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 6, 4);
    let mut m = Model::<f32>::build(&small_model(), 0).unwrap();
    // One batch covering the whole set at the fixed scale.
    let cfg = TrainConfig {
        batch_size: 64,
        multi_scale: false,
        ..short(1)
    };
    let log = pretrain(&mut m, &cfg, &data, &RunOptions::default()).unwrap();
    let labels: Vec<f64> = (0..data.len())
        .flat_map(|i| data.sample(i, 240).unwrap().label_norm.map(|v| v as f32 as f64))
        .collect();
    let want = labels.iter().map(|v| v * v).sum::<f64>() / labels.len() as f64;
    let got = log.first_loss().unwrap();
    assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
}

#[test]
fn divergence_stops_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 6, 5);
    let mut m = Model::<f32>::build(&ModelConfig { zero_init_head: false, ..small_model() }, 0).unwrap();
    let cfg = TrainConfig { lr0: 1e4, ..short(200) };
    match pretrain(&mut m, &cfg, &data, &RunOptions::default()) {
        Err(TrainError::NonFinite { iter, lr, .. }) => {
            assert!(iter < 200);
            assert_eq!(lr, 1e4);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn periodic_checkpoints_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("d"), 6, 6);
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let mut m = Model::<f32>::build(&small_model(), 0).unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..short(5) };
    let opts = RunOptions {
        checkpoint_dir: Some(out.clone()),
        ..Default::default()
    };
    let log = pretrain(&mut m, &cfg, &data, &opts).unwrap();
    for it in [2, 4] {
        let ck = load_checkpoint(&out.join(format!("pretrain_iter{it}.ckpt"))).unwrap();
        assert_eq!(ck.provenance.get("iter"), Some(it.to_string().as_str()));
        assert!(ck.has_momentum);
    }
    assert!(!out.join("pretrain_iter6.ckpt").exists());
    let csv = log.to_csv();
    assert!(csv.starts_with("iter,lr,loss,grad_norm\n0,"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn finetune_trains_through_triangulation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 8, 7);
    let mut m = Model::<f32>::build(&small_model(), 0).unwrap();
    pretrain(&mut m, &short(30), &data, &RunOptions::default()).unwrap();
    let before = evaluate(&m, &StereoRig::default(), &data).unwrap();
    reset_momentum(&mut m);
    let cfg = TrainConfig {
        batch_size: 4,
        max_iters: 5,
        ..desk_finetune_config()
    };
    let log = finetune(&mut m, &StereoRig::default(), &cfg, &data, &RunOptions::default()).unwrap();
    assert!(m.config().attach_bdm);
    // The first finetune batch sees the pretrained network unchanged, so its
    // per-coordinate MSE (mm^2) is on the scale of the evaluated joint error.
    let rms_joint = (3.0 * log.first_loss().unwrap()).sqrt();
    let ratio = rms_joint / before.mean_mm;
    assert!((1.0 / 3.0..3.0).contains(&ratio), "{rms_joint} vs {}", before.mean_mm);
}

#[test]
fn evaluation_needs_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let mut data = dataset(tmp.path(), 2, 8);
    data.truncate(0);
    let m = Model::<f32>::build(&small_model(), 0).unwrap();
    assert!(evaluate(&m, &StereoRig::default(), &data).is_err());
}

#[test]
fn injected_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 5, 9);
    let truth: Vec<_> = data.records().map(|r| r.points()).collect();
    let r = evaluate_predictions(&truth, &truth).unwrap();
    assert_eq!(r.mean_mm, 0.0);
    assert_eq!(r.per_joint_mm, [0.0; NUM_JOINTS]);
    assert!(r.success.iter().filter(|(t, _)| *t > 0.0).all(|&(_, p)| p == 100.0));
}

fn frames() -> impl Strategy<Value = Vec<[f64; NUM_JOINTS]>> {
    prop::collection::vec(prop::array::uniform6(0.0f64..120.0), 1..40)
}

proptest! {
    #[test]
    fn success_curve_is_monotone_and_bounded(errors in frames()) {
        let r = MetricsReport::from_errors(&errors).unwrap();
        prop_assert_eq!(r.success.len(), 81);
        for w in r.success.windows(2) {
            prop_assert!(w[1].1 >= w[0].1);
        }
        prop_assert!(r.success.iter().all(|&(_, p)| (0.0..=100.0).contains(&p)));
        let mean = errors.iter().flatten().sum::<f64>() / (errors.len() * NUM_JOINTS) as f64;
        prop_assert!((r.mean_mm - mean).abs() < 1e-9 * (1.0 + mean));
    }

    #[test]
    fn prediction_errors_are_euclidean(offsets in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0), 1..10)) {
        let truth: Vec<[Point3D; NUM_JOINTS]> = offsets.iter().map(|_| [Point3D::new(0.0, 0.0, 300.0); NUM_JOINTS]).collect();
        let pred: Vec<[Point3D; NUM_JOINTS]> = offsets.iter().map(|&(x, y, z)| [Point3D::new(x, y, 300.0 + z); NUM_JOINTS]).collect();
        let r = evaluate_predictions(&pred, &truth).unwrap();
        let want = offsets.iter().map(|&(x, y, z)| (x * x + y * y + z * z).sqrt()).sum::<f64>() / offsets.len() as f64;
        prop_assert!((r.mean_mm - want).abs() < 1e-9 * (1.0 + want));
    }
}
