//! Acceptance suite: one PASS/FAIL line per criterion, written straight to
//! stderr so the lines show up without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsbnet::data::dataset::read_manifest;
use tsbnet::data::*;
use tsbnet::geometry::*;
use tsbnet::gradient_suite::{run_target, Precision, Target};
use tsbnet::model::{param_count, LayerKind, Model, ModelConfig, Sharing};
use tsbnet::nn::conv::conv2d_forward;
use tsbnet::nn::TrainConfig;
use tsbnet::train::ablation::{ablation_csv, ablation_ladder, ablation_run, AblationPlan, RowOutcome};
use tsbnet::train::*;
use tsbnet::Tensor;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    Outcome { name, pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn geometry_oracle() -> Outcome {
    let rig = StereoRig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<Point3D> = (0..10_000)
        .map(|_| Point3D::new(rng.random_range(-150.0..150.0), rng.random_range(-120.0..120.0), rng.random_range(200.0..500.0)))
        .collect();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut proj_mismatch: f64 = 0.0;
    for p in &pts {
        let pair = project_point(&rig, p).unwrap();
        // Pinhole model written out independently: f/lambda = 400 px.
        let want_ul = 320.0 + 400.0 * (p.x + 20.0) / p.z;
        let want_ur = 320.0 + 400.0 * (p.x - 20.0) / p.z;
        let want_v = 240.0 + 400.0 * p.y / p.z;
        proj_mismatch = proj_mismatch
            .max((pair.u_l - want_ul).abs())
            .max((pair.u_r - want_ur).abs())
            .max((pair.v_l - want_v).abs());
        let back = bdm_forward(&rig, &pixels_to_triplet(&pair), &DisparityGuard::strict()).unwrap().point;
        let err = ((back.x - p.x).powi(2) + (back.y - p.y).powi(2) + (back.z - p.z).powi(2)).sqrt()
            / (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
        worst = worst.max(err);
    }
    let t = start.elapsed();
    let pass = worst < 1e-9 && proj_mismatch < 1e-9 && t < Duration::from_secs(1);
    report(
        "geometry oracle",
        pass,
        format!("10000 points, worst relative error {worst:.2e} (< 1e-9), projection vs closed form {proj_mismatch:.1e}, {} (< 1s)", secs(t)),
    )
}

fn bdm_gradients() -> Outcome {
    let start = Instant::now();
    let suite = run_target(Target::Bdm, Precision::Double, 1000, 2).unwrap();
    let rig = StereoRig::default();
    // Worked point: centre of the frame, q = 40 px, so z = 400 mm.
    let trip = PixelTriplet::new(320.0, 40.0, 240.0);
    let guard = DisparityGuard::strict();
    let col = |g: [f64; 3]| bdm_backward(&rig, &trip, &guard, g).unwrap();
    let dx = col([1.0, 0.0, 0.0]);
    let dy = col([0.0, 1.0, 0.0]);
    let dz = col([0.0, 0.0, 1.0]);
    let partials_ok = (dx[0] - 1.0).abs() < 1e-9 && (dy[2] - 1.0).abs() < 1e-9 && (dz[1] + 10.0).abs() < 1e-9;
    let t = start.elapsed();
    let pass = suite.worst.max_rel_error < 1e-6 && partials_ok && t < Duration::from_secs(5);
    report(
        "triangulation gradient",
        pass,
        format!(
            "1000 triplets worst {:.2e} (< 1e-6); dx/ds {} dy/dt {} dz/dq {} (want 1, 1, -10 to 1e-9); {} (< 5s)",
            suite.worst.max_rel_error,
            dx[0],
            dy[2],
            dz[1],
            secs(t)
        ),
    )
}

fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (ko, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = Vec::with_capacity(n * ko * h * wd);
    for i in 0..n {
        for o in 0..ko {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for dy in 0..k as isize {
                            for dx in 0..k as isize {
                                let (sy, sx) = (y + dy - p, xx + dx - p);
                                if (0..h as isize).contains(&sy) && (0..wd as isize).contains(&sx) {
                                    acc += x.data()[((i * c + ci) * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((o * c + ci) * k + dy as usize) * k + dx as usize];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn layer_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut pass = true;
    for target in [Target::Conv, Target::Pool, Target::Fc, Target::Prelu, Target::Residual, Target::Loss] {
        for precision in [Precision::Double, Precision::Single] {
            let r = run_target(target, precision, 5, 3).unwrap();
            pass &= r.passed();
            worst.push(format!("{target}/{} {:.1e}", precision.name(), r.worst.max_rel_error));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv_err: f64 = 0.0;
    let instances = 120;
    for _ in 0..instances {
        let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=9), rng.random_range(1..=9)];
        let (ko, k) = (rng.random_range(1..=4), [1, 3, 5][rng.random_range(0..3)]);
        let mut rand_t = |s: &[usize]| Tensor::<f64>::from_fn(s, |_| rng.random_range(-1.0..1.0));
        let x = rand_t(&shape);
        let w = rand_t(&[ko, shape[1], k, k]);
        let b = rand_t(&[ko]);
        let got = conv2d_forward(&x, &w, &b).unwrap();
        for (g, r) in got.data().iter().zip(conv_reference(&x, &w, &b)) {
            conv_err = conv_err.max((g - r).abs() / r.abs().max(1.0));
        }
    }
    pass &= conv_err < 1e-6;
    let t = start.elapsed();
    pass &= t < Duration::from_secs(60);
    report(
        "layer gradients",
        pass,
        format!(
            "{} (< 1e-6 f64, < 1e-4 f32); conv vs direct loop on {instances} instances {conv_err:.1e}; {} (< 60s)",
            worst.join(", "),
            secs(t)
        ),
    )
}

/// Closed-form count: conv weights + bias + one PReLU slope per output channel.
fn closed_form_params(in_ch: usize, input: usize) -> usize {
    let unit = |ci: usize, co: usize, k: usize| co * ci * k * k + 2 * co;
    let shared = unit(in_ch, 32, 5) + 4 * unit(32, 32, 3) + unit(32, 48, 3) + unit(48, 48, 3);
    let stream = unit(48, 64, 3) + 2 * unit(64, 64, 3) + unit(64, 128, 3) + unit(128, 192, 3);
    let feat = 2 * 192 * (input / 8).pow(2);
    shared + 2 * stream + (feat * 512 + 2 * 512) + (512 * 256 + 2 * 256) + (256 * 18 + 18)
}

fn architecture() -> Outcome {
    let model = Model::<f32>::build(&ModelConfig::full(), 0).unwrap();
    let conv = |c, k, r| LayerKind::Conv { out_channels: c, kernel: k, repeat: r };
    let pool = LayerKind::Pool { size: 2 };
    let (sh, se, fu) = (Sharing::Shared, Sharing::Separate, Sharing::Fused);
    let want = [
        ("conv0", conv(32, 5, 1), sh),
        ("pool0", pool, sh),
        ("conv0x", conv(32, 3, 4), sh),
        ("pool1", pool, sh),
        ("conv1x", conv(48, 3, 2), sh),
        ("conv2x", conv(64, 3, 3), se),
        ("pool2", pool, se),
        ("conv31", conv(128, 3, 1), se),
        ("conv32", conv(192, 3, 1), se),
        ("fc1", LayerKind::Fc { out: 512 }, fu),
        ("fc2", LayerKind::Fc { out: 256 }, fu),
        ("fc3", LayerKind::Fc { out: 18 }, fu),
    ];
    let got: Vec<_> = model.layer_table().into_iter().map(|r| (r.name, r.kind, r.sharing)).collect();
    let table_ok = got == want;
    let count = param_count(&ModelConfig::full()).unwrap();
    let expected = closed_form_params(2, 96);
    report(
        "architecture",
        table_ok && count == expected && model.left != model.right,
        format!("layer table {}; parameters {count} vs closed form {expected}", if table_ok { "matches" } else { "differs" }),
    )
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let r = run_target(Target::E2e, Precision::Single, 4, 5).unwrap();
    report(
        "end-to-end gradient",
        r.worst.max_rel_error < 1e-4,
        format!("f32 network + denormalization + triangulation, worst {:.2e} at {} (< 1e-4), {}", r.worst.max_rel_error, r.tensor, secs(start.elapsed())),
    )
}

fn two_phase_training() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), &GenerateOptions { train: 64, test: 0, seed: 7, ..Default::default() }).unwrap();
    let rig = dataset::read_rig(tmp.path()).unwrap();
    let model_cfg = ModelConfig::desk();
    let data = load_dataset(tmp.path(), &LoadOptions::new(model_cfg.input_size, model_cfg.use_mask_channel, None)).unwrap();
    let mut model = Model::<f32>::build(&model_cfg, 0).unwrap();
    let pre_cfg = TrainConfig { max_iters: 3000, ..TrainConfig::desk() };
    let log = pretrain(&mut model, &pre_cfg, &data, &RunOptions::default()).unwrap();
    let first = log.first_loss().unwrap();
    let (smooth_start, smooth_end) = log.smoothed_ends(100).unwrap();
    let reduction = 1.0 - smooth_end / first;
    let base = evaluate(&model, &rig, &data).unwrap().mean_mm;

    let mut finite = log.rows.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite());
    let mut finals = Vec::new();
    let mut failures = Vec::new();
    let run_ft = |seed: u64, iters: u64| {
        let mut m = model.clone();
        reset_momentum(&mut m);
        let cfg = TrainConfig { seed, max_iters: iters, ..desk_finetune_config() };
        finetune(&mut m, &rig, &cfg, &data, &RunOptions::default()).map(|log| (m, log))
    };
    for seed in 0..3 {
        match run_ft(seed, desk_finetune_config().max_iters) {
            Ok((m, log)) => {
                finite &= log.rows.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite());
                finals.push(evaluate(&m, &rig, &data).unwrap().mean_mm);
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    // Longer run for the stability requirement.
    let long = run_ft(3, 3000);
    let long_ok = matches!(&long, Ok((_, log)) if log.rows.iter().all(|r| r.loss.is_finite()));
    if let Err(e) = &long {
        failures.push(format!("3000-iteration run: {e}"));
    }
    finite &= failures.is_empty() && long_ok;
    finals.sort_by(f64::total_cmp);
    let median = finals.get(1).copied().unwrap_or(f64::NAN);
    let t = start.elapsed();
    let pass = reduction >= 0.9 && smooth_end < smooth_start && median <= base && finite && t < Duration::from_secs(15 * 60);
    report(
        "two-phase training",
        pass,
        format!(
            "pretrain MSE {first:.4} -> {smooth_end:.5} (last-100 mean), reduction {:.1}% (>= 90%); triangulated error pretrain {base:.2} mm, finetune seeds {finals:.2?} median {median:.2} mm (<= pretrain); all finite {finite}{}; {} (< 900s)",
            100.0 * reduction,
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) },
            secs(t)
        ),
    )
}

fn metrics_contract() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), &GenerateOptions { train: 0, test: 16, seed: 3, ..Default::default() }).unwrap();
    let data = load_dataset(tmp.path(), &LoadOptions::new(32, true, Some(Split::Test))).unwrap();
    let truth: Vec<_> = data.records().map(|r| r.points()).collect();
    let injected = evaluate_predictions(&truth, &truth).unwrap();
    let identity = injected.mean_mm == 0.0 && injected.success.iter().filter(|(t, _)| *t > 0.0).all(|&(_, p)| p == 100.0);

    let hand = MetricsReport::from_errors(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap();
    let hand_ok = hand.mean_mm == 3.5 && hand.success_at(5.0) == Some(0.0) && hand.success_at(6.0) == Some(100.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut monotone = true;
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let errors: Vec<[f64; 6]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..100.0))).collect();
        let r = MetricsReport::from_errors(&errors).unwrap();
        monotone &= r.success.windows(2).all(|w| w[1].1 >= w[0].1) && r.success.len() == 81;
    }
    report(
        "metrics contract",
        identity && hand_ok && monotone,
        format!(
            "injected truth mean {} mm, success 100% above 0: {identity}; hand example mean {} success@5 {:?} success@6 {:?}; monotone over 200 random sets: {monotone}",
            injected.mean_mm,
            hand.mean_mm,
            hand.success_at(5.0),
            hand.success_at(6.0)
        ),
    )
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn dataset_validity() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let opts = GenerateOptions { train: 48, test: 16, seed: 11, ..Default::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&a, &opts).unwrap();
    generate_dataset(&b, &opts).unwrap();
    let deterministic = tree_bytes(&a) == tree_bytes(&b);
    let rig = StereoRig::default();
    let records = read_manifest(&a).unwrap();
    let bad: Vec<_> = records.iter().filter(|r| r.check_labels(&rig).is_err()).map(|r| r.id.clone()).collect();
    // Independent check of the stored pairs against triangulation.
    let mut worst: f64 = 0.0;
    for r in &records {
        for (p, px) in r.points().iter().zip(r.pairs()) {
            let q = px.u_l - px.u_r;
            let z = 16000.0 / q;
            let x = ((px.u_l + px.u_r) / 2.0 - 320.0) * z / 400.0;
            let y = ((px.v_l + px.v_r) / 2.0 - 240.0) * z / 400.0;
            worst = worst.max(((x - p.x).powi(2) + (y - p.y).powi(2) + (z - p.z).powi(2)).sqrt());
        }
    }
    let mut masks_invariant = true;
    let params = SceneParams::default();
    for seed in 0..8 {
        let scene = sample_scene(&rig, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = render_views(&rig, &scene, &RenderParams::default(), &mut ChaCha8Rng::seed_from_u64(100 + seed));
        let y = render_views(&rig, &scene, &RenderParams::default(), &mut ChaCha8Rng::seed_from_u64(200 + seed));
        masks_invariant &= x.left.mask == y.left.mask && x.right.mask == y.right.mask && x.left.gray != y.left.gray;
    }
    report(
        "dataset validity",
        bad.is_empty() && worst < 1e-6 && masks_invariant && deterministic,
        format!(
            "{} records, failing label scan: {bad:?}, worst 3D vs triangulated pixels {worst:.1e} mm (< 1e-6); masks invariant under illumination: {masks_invariant}; byte-identical regeneration: {deterministic}",
            records.len()
        ),
    )
}

fn ablation_harness() -> Outcome {
    let rows = ablation_ladder(0.25);
    let names: Vec<_> = rows.iter().map(|r| r.strategy).collect();
    let order_ok = names
        == [
            "baseline",
            "+multi-scale training",
            "+more channels",
            "+mask images",
            "+residual",
            "+binocular distance measurement layer",
        ];
    let one_flag = rows.windows(2).all(|w| w[1].flags.diff(&w[0].flags).len() == 1);
    let refs: Vec<f64> = rows.iter().map(|r| r.reference_mean_mm).collect();
    let refs_ok = refs == [13.6, 13.2, 12.3, 11.4, 11.2, 10.9];

    // Mechanics: every row trains and evaluates on a tiny budget.
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), &GenerateOptions { train: 8, test: 4, seed: 5, ..Default::default() }).unwrap();
    let plan = AblationPlan {
        model: ModelConfig { input_size: 16, ..ModelConfig::desk() },
        pretrain: TrainConfig { batch_size: 4, max_iters: 3, ..TrainConfig::desk() },
        finetune: TrainConfig { batch_size: 4, max_iters: 3, ..desk_finetune_config() },
        model_seed: 0,
        limit: None,
    };
    let results = ablation_run(&plan, &rows, tmp.path(), None);
    let ran = results.iter().all(|r| matches!(r.outcome, RowOutcome::Done(_)));
    let csv = ablation_csv(&results);
    let flagged = csv.lines().skip(1).all(|l| l.split(',').nth(9) == Some("false")) && csv.lines().count() == 7;
    report(
        "ablation harness",
        order_ok && one_flag && refs_ok && ran && flagged,
        format!(
            "rows in order: {order_ok}; one flag per step: {one_flag}; reference column {refs:?} flagged non-reproducible: {flagged}; all six rows trained and evaluated: {ran}"
        ),
    )
}

#[test]
fn acceptance() {
    // libtest prints `test acceptance ... ` without a newline first.
    let _ = std::io::stderr().write_all(b"\n");
    let outcomes = vec![
        geometry_oracle(),
        bdm_gradients(),
        layer_gradients(),
        architecture(),
        end_to_end(),
        two_phase_training(),
        metrics_contract(),
        dataset_validity(),
        ablation_harness(),
    ];
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{}: {}", o.name, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
