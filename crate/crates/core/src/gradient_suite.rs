//! Finite-difference checks for every differentiable piece of the pipeline.
//!
//! Each target draws random problem instances, computes the analytic
//! gradient of a random linear functional of the output, and compares it
//! with central differences of the same functional evaluated in `f64`. In
//! single precision the analytic side runs in `f32` while the reference still
//! runs in `f64` on the upcast values.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    bdm_backward, bdm_forward, pixels_to_triplet, project_point, DisparityGuard, PixelTriplet, Point3D,
    StereoRig,
};
use crate::model::{BdmStage, CropMeta, Model, ModelConfig, ModelError, OUTPUT_DIM};
use crate::nn::conv::{conv2d_backward, conv2d_forward};
use crate::nn::gradcheck::{grad_check, grad_check_piecewise, GradCheckError, GradCheckOptions, GradCheckReport};
use crate::nn::linear::{linear_backward_into, linear_forward};
use crate::nn::pool::{maxpool2_backward, maxpool2_forward};
use crate::nn::prelu::{prelu_backward_into, prelu_forward};
use crate::nn::{mse_loss, residual_add, residual_add_backward};
use crate::tensor::{Scalar, Tensor};

pub const DOUBLE_TOLERANCE: f64 = 1e-6;
pub const SINGLE_TOLERANCE: f64 = 1e-4;
/// Probed coordinates per checked tensor.
pub const PROBES_PER_TENSOR: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Bdm,
    Conv,
    Pool,
    Fc,
    Prelu,
    Residual,
    Loss,
    E2e,
}

impl Target {
    pub const ALL: [Target; 8] = [
        Target::Bdm,
        Target::Conv,
        Target::Pool,
        Target::Fc,
        Target::Prelu,
        Target::Residual,
        Target::Loss,
        Target::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Bdm => "bdm",
            Target::Conv => "conv",
            Target::Pool => "pool",
            Target::Fc => "fc",
            Target::Prelu => "prelu",
            Target::Residual => "residual",
            Target::Loss => "loss",
            Target::E2e => "e2e",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown gradcheck target `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Double => DOUBLE_TOLERANCE,
            Precision::Single => SINGLE_TOLERANCE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Double => "f64",
            Precision::Single => "f32",
        }
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Worst result over all trials of one target.
#[derive(Debug, Clone)]
pub struct TargetReport {
    pub target: Target,
    pub precision: Precision,
    /// Which tensor the worst coordinate belongs to.
    pub tensor: String,
    pub worst: GradCheckReport,
    pub trials: usize,
}

impl TargetReport {
    pub fn tolerance(&self) -> f64 {
        self.precision.tolerance()
    }

    pub fn passed(&self) -> bool {
        self.worst.passes(self.tolerance())
    }
}

struct Worst {
    tensor: String,
    report: Option<GradCheckReport>,
}

impl Worst {
    fn new() -> Self {
        Self {
            tensor: String::new(),
            report: None,
        }
    }

    fn offer(&mut self, tensor: &str, r: GradCheckReport) {
        let replace = match self.report {
            None => true,
            Some(cur) => r.max_rel_error > cur.max_rel_error,
        };
        if replace {
            self.tensor = tensor.to_string();
            self.report = Some(r);
        }
    }
}

/// Values representable exactly in `f32`, so both precisions see the same point.
fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi) as f32 as f64).collect()
}

fn tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, data.iter().map(|&v| T::of(v)).collect()).expect("shape matches data")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn options(seed: u64, step: f64) -> GradCheckOptions {
    GradCheckOptions {
        probes: PROBES_PER_TENSOR,
        step,
        seed,
        ..GradCheckOptions::default()
    }
}

/// Runs `target` for `trials` random instances and returns the worst coordinate.
pub fn run_target(target: Target, precision: Precision, trials: usize, seed: u64) -> Result<TargetReport, SuiteError> {
    let trials = trials.max(1);
    let mut worst = Worst::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        let trial_seed = rng.random::<u64>();
        match (target, precision) {
            (Target::Bdm, _) => bdm_trial(&mut rng, trial_seed, &mut worst)?,
            (Target::Conv, Precision::Double) => conv_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Conv, Precision::Single) => conv_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::Pool, Precision::Double) => pool_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Pool, Precision::Single) => pool_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::Fc, Precision::Double) => fc_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Fc, Precision::Single) => fc_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::Prelu, Precision::Double) => prelu_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Prelu, Precision::Single) => prelu_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::Residual, Precision::Double) => residual_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Residual, Precision::Single) => residual_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::Loss, Precision::Double) => loss_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::Loss, Precision::Single) => loss_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
            (Target::E2e, Precision::Double) => e2e_trial::<f64>(&mut rng, trial_seed, &mut worst)?,
            (Target::E2e, Precision::Single) => e2e_trial::<f32>(&mut rng, trial_seed, &mut worst)?,
        }
    }
    Ok(TargetReport {
        target,
        precision,
        tensor: worst.tensor,
        worst: worst.report.expect("at least one trial ran"),
        trials,
    })
}

/// A random valid triplet: a point inside the working volume seen by both cameras.
pub fn random_valid_triplet(rig: &StereoRig, rng: &mut impl Rng) -> PixelTriplet {
    loop {
        let p = Point3D::new(
            rng.random_range(-150.0..150.0),
            rng.random_range(-120.0..120.0),
            rng.random_range(200.0..500.0),
        );
        let pair = project_point(rig, &p).expect("positive depth");
        let inside = |u: f64, lim: f64| (0.0..lim).contains(&u);
        if inside(pair.u_l, rig.w) && inside(pair.u_r, rig.w) && inside(pair.v_l, rig.h) {
            return pixels_to_triplet(&pair);
        }
    }
}

fn bdm_trial(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let rig = StereoRig::default();
    let guard = DisparityGuard::strict();
    let trip = random_valid_triplet(&rig, rng);
    let up: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let analytic = bdm_backward(&rig, &trip, &guard, up)?;
    let f = |v: &[f64]| {
        let p = bdm_forward(&rig, &PixelTriplet::new(v[0], v[1], v[2]), &guard)
            .map(|t| t.point.to_array())
            .unwrap_or([f64::NAN; 3]);
        dot(&p, &up)
    };
    let r = grad_check(f, &trip.to_array(), &analytic, &options(seed, 1e-4))?;
    worst.offer("triplet", r);
    Ok(())
}

fn conv_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(3..=9);
    let w = rng.random_range(3..=9);
    let k_out = rng.random_range(1..=4);
    let k = *[1usize, 3, 5].choose(rng).expect("non-empty");
    let (xs, ws, bs) = ([n, c, h, w], [k_out, c, k, k], [k_out]);
    let x = uniform_vec(rng, xs.iter().product(), -1.0, 1.0);
    let wt = uniform_vec(rng, ws.iter().product(), -1.0, 1.0);
    let b = uniform_vec(rng, k_out, -1.0, 1.0);
    let proj = uniform_vec(rng, n * k_out * h * w, -1.0, 1.0);
    let grads = conv2d_backward(
        &tensor::<T>(&xs, &x),
        &tensor::<T>(&ws, &wt),
        &tensor::<T>(&[n, k_out, h, w], &proj),
    )?;
    let eval = |x: &[f64], wt: &[f64], b: &[f64]| {
        let y = conv2d_forward(&tensor::<f64>(&xs, x), &tensor::<f64>(&ws, wt), &tensor::<f64>(&bs, b))
            .expect("shapes fixed");
        dot(y.data(), &proj)
    };
    let opts = options(seed, 1e-4);
    worst.offer("input", grad_check(|v| eval(v, &wt, &b), &x, &to_f64(&grads.input), &opts)?);
    worst.offer("weight", grad_check(|v| eval(&x, v, &b), &wt, &to_f64(&grads.weight), &opts)?);
    worst.offer("bias", grad_check(|v| eval(&x, &wt, v), &b, &to_f64(&grads.bias), &opts)?);
    Ok(())
}

fn pool_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(1..=4);
    let w = 2 * rng.random_range(1..=4);
    let shape = [n, c, h, w];
    let len: usize = shape.iter().product();
    // Distinct values spaced well beyond the finite-difference step.
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    x.shuffle(rng);
    let x: Vec<f64> = x.into_iter().map(|v| (v + rng.random_range(0.0..0.001)) as f32 as f64).collect();
    let proj = uniform_vec(rng, len / 4, -1.0, 1.0);
    let out_shape = [n, c, h / 2, w / 2];
    let p = maxpool2_forward(&tensor::<T>(&shape, &x))?;
    let g = maxpool2_backward(&shape, &p.argmax, &tensor::<T>(&out_shape, &proj))?;
    let f = |v: &[f64]| {
        let y = maxpool2_forward(&tensor::<f64>(&shape, v)).expect("even dims");
        dot(y.output.data(), &proj)
    };
    worst.offer("input", grad_check(f, &x, &to_f64(&g), &options(seed, 1e-4))?);
    Ok(())
}

fn fc_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=24);
    let m = rng.random_range(1..=12);
    let x = uniform_vec(rng, n * d, -1.0, 1.0);
    let wt = uniform_vec(rng, m * d, -1.0, 1.0);
    let b = uniform_vec(rng, m, -1.0, 1.0);
    let proj = uniform_vec(rng, n * m, -1.0, 1.0);
    let mut gw = Tensor::<T>::zeros(&[m, d]);
    let mut gb = Tensor::<T>::zeros(&[m]);
    let gx = linear_backward_into(
        &tensor::<T>(&[n, d], &x),
        &tensor::<T>(&[m, d], &wt),
        &tensor::<T>(&[n, m], &proj),
        &mut gw,
        &mut gb,
    )?;
    let eval = |x: &[f64], wt: &[f64], b: &[f64]| {
        let y = linear_forward(&tensor::<f64>(&[n, d], x), &tensor::<f64>(&[m, d], wt), &tensor::<f64>(&[m], b))
            .expect("shapes fixed");
        dot(y.data(), &proj)
    };
    let opts = options(seed, 1e-4);
    worst.offer("input", grad_check(|v| eval(v, &wt, &b), &x, &to_f64(&gx), &opts)?);
    worst.offer("weight", grad_check(|v| eval(&x, v, &b), &wt, &to_f64(&gw), &opts)?);
    worst.offer("bias", grad_check(|v| eval(&x, &wt, v), &b, &to_f64(&gb), &opts)?);
    Ok(())
}

fn prelu_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=4);
    let inner = rng.random_range(1..=16);
    let shape = [n, c, inner];
    // Keep every input away from the kink at zero.
    let x: Vec<f64> = (0..n * c * inner)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            let v = if rng.random_bool(0.5) { mag } else { -mag };
            v as f32 as f64
        })
        .collect();
    let a = uniform_vec(rng, c, 0.0, 0.5);
    let proj = uniform_vec(rng, x.len(), -1.0, 1.0);
    let mut ga = Tensor::<T>::zeros(&[c]);
    let gx = prelu_backward_into(
        &tensor::<T>(&shape, &x),
        &tensor::<T>(&[c], &a),
        &tensor::<T>(&shape, &proj),
        &mut ga,
    )?;
    let eval = |x: &[f64], a: &[f64]| {
        let y = prelu_forward(&tensor::<f64>(&shape, x), &tensor::<f64>(&[c], a)).expect("shapes fixed");
        dot(y.data(), &proj)
    };
    let opts = options(seed, 1e-4);
    worst.offer("input", grad_check(|v| eval(v, &a), &x, &to_f64(&gx), &opts)?);
    worst.offer("slope", grad_check(|v| eval(&x, v), &a, &to_f64(&ga), &opts)?);
    Ok(())
}

fn residual_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=6)];
    let len: usize = shape.iter().product();
    let a = uniform_vec(rng, len, -1.0, 1.0);
    let b = uniform_vec(rng, len, -1.0, 1.0);
    let proj = uniform_vec(rng, len, -1.0, 1.0);
    let (ga, gb) = residual_add_backward(&tensor::<T>(&shape, &proj));
    let eval = |a: &[f64], b: &[f64]| {
        let y = residual_add(&tensor::<f64>(&shape, a), &tensor::<f64>(&shape, b)).expect("same shape");
        dot(y.data(), &proj)
    };
    let opts = options(seed, 1e-4);
    worst.offer("main", grad_check(|v| eval(v, &b), &a, &to_f64(&ga), &opts)?);
    worst.offer("skip", grad_check(|v| eval(&a, v), &b, &to_f64(&gb), &opts)?);
    Ok(())
}

fn loss_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let shape = [rng.random_range(1..=8), rng.random_range(1..=18)];
    let len = shape[0] * shape[1];
    let pred = uniform_vec(rng, len, -2.0, 2.0);
    let label = uniform_vec(rng, len, -2.0, 2.0);
    let (_, g) = mse_loss(&tensor::<T>(&shape, &pred), &tensor::<T>(&shape, &label))?;
    let f = |v: &[f64]| {
        mse_loss(&tensor::<f64>(&shape, v), &tensor::<f64>(&shape, &label))
            .expect("same shape")
            .0
    };
    worst.offer("pred", grad_check(f, &pred, &to_f64(&g), &options(seed, 1e-4))?);
    Ok(())
}

/// Small but complete network used by the end-to-end check.
pub fn e2e_config() -> ModelConfig {
    ModelConfig {
        channel_multiplier: 0.125,
        input_size: 16,
        zero_init_head: false,
        ..ModelConfig::full()
    }
}

/// Tensors probed by the end-to-end check: one from every stage kind.
pub const E2E_PROBED: &[&str] = &[
    "shared.conv0.weight",
    "shared.conv0.slope",
    "shared.conv0x_2.weight",
    "shared.conv1x_1.bias",
    "left.conv2x_1.weight",
    "right.conv2x_3.weight",
    "left.conv32.weight",
    "right.conv31.slope",
    "head.fc1.weight",
    "head.fc2.slope",
    "head.fc3.weight",
    "head.fc3.bias",
];

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn e2e_trial<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, worst: &mut Worst) -> Result<(), SuiteError> {
    let cfg = e2e_config();
    let mut reference = Model::<f64>::build(&cfg, seed)?;
    // Small head weights keep the predicted disparities well inside the guard.
    for v in reference.head.fc3.weight.value.data_mut() {
        *v *= 0.05;
    }
    for (_, p) in reference.named_params_mut() {
        for v in p.value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    let n = 2;
    let shape = reference.input_shape(n);
    // Every input is representable in f32 so both precisions see the same function.
    let left = round_f32(uniform_vec(rng, shape.iter().product(), 0.0, 1.0));
    let right = round_f32(uniform_vec(rng, shape.iter().product(), 0.0, 1.0));
    let (l64, r64) = (tensor::<f64>(&shape, &left), tensor::<f64>(&shape, &right));
    let pixels = reference.forward_pixels(&l64, &r64)?;
    // The stereo offset is picked after the forward pass so that every joint's
    // disparity sits well inside the guard.
    let metas: Vec<CropMeta> = pixels
        .data()
        .chunks_exact(OUTPUT_DIM)
        .map(|row| {
            let scale = *[240.0f64, 200.0, 160.0].choose(rng).expect("non-empty") / cfg.input_size as f64;
            let crop = scale * cfg.input_size as f64;
            let lowest = row.iter().skip(1).step_by(3).fold(f64::INFINITY, |m, &q| m.min(crop * q));
            let offset_r = rng.random_range(100.0..300.0);
            CropMeta {
                offset_l: offset_r + rng.random_range(30.0..60.0) - lowest,
                offset_r,
                offset_y: rng.random_range(50.0..200.0),
                scale,
                input_size: cfg.input_size,
            }
        })
        .collect();
    let proj = round_f32(uniform_vec(rng, n * OUTPUT_DIM, -1.0, 1.0));
    let stage = BdmStage::strict(StereoRig::default());

    let mut model: Model<T> = reference.cast();
    model.zero_grad();
    let (lt, rt) = (tensor::<T>(&shape, &left), tensor::<T>(&shape, &right));
    let (_, trace, bdm) = model.forward_3d_traced(&stage, &metas, &lt, &rt)?;
    let pixels_grad = stage.backward(&bdm, &tensor::<T>(&[n, OUTPUT_DIM], &proj))?;
    model.backward(&trace, &pixels_grad)?;

    let mut opts = options(seed, 1e-5);
    if T::NAME == "f32" {
        // Single-precision rounding through the whole chain scales with the
        // tensor's gradient magnitude, so errors are measured against it.
        opts.floor_rel = 1.0;
    }

    // Gradient at the network output, through denormalization and triangulation only.
    let head_out = |v: &[f64]| {
        let t = tensor::<f64>(&[n, OUTPUT_DIM], v);
        match stage.forward(&t, &metas) {
            Ok((p, _)) => dot(p.data(), &proj),
            Err(_) => f64::NAN,
        }
    };
    worst.offer("fc3_output", grad_check(head_out, pixels.data(), &to_f64(&pixels_grad), &opts)?);

    for &name in E2E_PROBED {
        let analytic = model
            .named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| to_f64(&p.grad))
            .expect("probed tensor exists");
        let start = reference
            .named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.value.data().to_vec())
            .expect("probed tensor exists");
        let mut probe = reference.clone();
        let f = |v: &[f64]| {
            for (n, p) in probe.named_params_mut() {
                if n == name {
                    p.value.data_mut().copy_from_slice(v);
                }
            }
            match probe.forward_3d_traced(&stage, &metas, &l64, &r64) {
                Ok((out, trace, _)) => (dot(out.data(), &proj), trace.activation_pattern()),
                Err(_) => (f64::NAN, Vec::new()),
            }
        };
        worst.offer(name, grad_check_piecewise(f, &start, &analytic, &opts)?);
    }
    Ok(())
}
