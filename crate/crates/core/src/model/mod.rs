//! The two-stream architecture.
//!
//! ```text
//!              left [N,C,S,S]            right [N,C,S,S]
//!                    |                          |
//!   shared   conv0 5x5, pool0, conv0x 3x3 x4, pool1, conv1x 3x3 x2
//!                    |                          |
//!   separate conv2x 3x3 x3, pool2,      conv2x 3x3 x3, pool2,
//!            conv31, conv32             conv31, conv32
//!                    \________ concat ________/
//!                    fc1 512, fc2 256, fc3 18
//!                               |
//!              (optional) triangulation to (x, y, z) x 6
//! ```
//!
//! The shared stages exist once; both streams run through the same
//! parameters and their gradients add up in the same buffers.

mod bdm;
pub mod checkpoint;
mod crop;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::nn::pool::{maxpool2_backward, maxpool2_forward};
use crate::nn::{residual_add, Conv2d, Linear, PRelu, Param};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use bdm::{forward_3d, BdmStage, BdmTrace};
pub use crop::{denormalize_triplet, normalize_triplet, CropMeta};

pub const NUM_JOINTS: usize = 6;
pub const OUTPUT_DIM: usize = 3 * NUM_JOINTS;
pub const JOINT_NAMES: [&str; NUM_JOINTS] = ["thumb", "index", "middle", "ring", "pinky", "palm_root"];

/// Conv channel counts at multiplier 1.0: conv0, conv0x, conv1x, conv2x, conv31, conv32.
pub const BASE_CHANNELS: [usize; 6] = [32, 32, 48, 64, 128, 192];
pub const FC_SIZES: [usize; 3] = [512, 256, OUTPUT_DIM];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("batch has {batch} samples but {metas} crop records")]
    MetaCount { batch: usize, metas: usize },
    #[error("model has no triangulation stage attached")]
    BdmDetached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 1.0 reproduces the full channel table, 0.5 the narrower baseline.
    pub channel_multiplier: f64,
    /// Feed the binary mask as a second input channel.
    pub use_mask_channel: bool,
    pub use_residual: bool,
    pub attach_bdm: bool,
    /// Side of the square network input; must be a multiple of 8.
    pub input_size: usize,
    /// Start the regression head at exactly zero.
    pub zero_init_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Every improvement enabled, full channel counts, 96 px input.
    pub fn full() -> Self {
        Self {
            channel_multiplier: 1.0,
            use_mask_channel: true,
            use_residual: true,
            attach_bdm: true,
            input_size: 96,
            zero_init_head: false,
        }
    }

    /// Reduced width and resolution that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            channel_multiplier: 0.25,
            input_size: 32,
            zero_init_head: true,
            ..Self::full()
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.use_mask_channel {
            2
        } else {
            1
        }
    }

    /// Scaled channel counts; fails when a count is not a positive integer.
    pub fn channels(&self) -> Result<[usize; 6], ModelError> {
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) {
            return Err(ModelError::Config(format!(
                "input_size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        let mut out = [0; 6];
        for (o, &base) in out.iter_mut().zip(&BASE_CHANNELS) {
            let scaled = base as f64 * self.channel_multiplier;
            let rounded = scaled.round();
            if !(scaled.is_finite() && (scaled - rounded).abs() < 1e-9 && rounded >= 1.0) {
                return Err(ModelError::Config(format!(
                    "channel multiplier {} gives non-integer channel count {scaled} (base {base})",
                    self.channel_multiplier
                )));
            }
            *o = rounded as usize;
        }
        Ok(out)
    }

    /// Spatial side after the three pooling stages.
    pub fn final_spatial(&self) -> usize {
        self.input_size / 8
    }

    /// Flattened feature length of one stream.
    pub fn stream_features(&self) -> Result<usize, ModelError> {
        let s = self.final_spatial();
        Ok(self.channels()?[5] * s * s)
    }
}

/// How a row of the layer table is instantiated across the two streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    Shared,
    Separate,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, repeat: usize },
    Pool { size: usize },
    Fc { out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: &'static str,
    pub kind: LayerKind,
    pub sharing: Sharing,
}

/// Convolution followed by PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub act: PRelu<T>,
}

#[derive(Debug, Clone)]
pub struct UnitTrace<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Scalar> ConvUnit<T> {
    fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, kernel, rng),
            act: PRelu::new(out_ch),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, UnitTrace<T>), TensorError> {
        let pre = self.conv.forward(x)?;
        let out = self.act.forward(&pre)?;
        Ok((
            out,
            UnitTrace {
                input: x.clone(),
                pre,
            },
        ))
    }

    fn backward(&mut self, trace: &UnitTrace<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let dz = self.act.backward(&trace.pre, dy)?;
        self.conv.backward(&trace.input, &dz)
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        vec![
            (format!("{prefix}.weight"), &mut self.conv.weight),
            (format!("{prefix}.bias"), &mut self.conv.bias),
            (format!("{prefix}.slope"), &mut self.act.slopes),
        ]
    }

    fn params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        vec![
            (format!("{prefix}.weight"), &self.conv.weight),
            (format!("{prefix}.bias"), &self.conv.bias),
            (format!("{prefix}.slope"), &self.act.slopes),
        ]
    }
}

#[derive(Debug, Clone)]
struct PoolTrace {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

fn pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolTrace), TensorError> {
    let p = maxpool2_forward(x)?;
    Ok((
        p.output,
        PoolTrace {
            input_shape: x.shape().to_vec(),
            argmax: p.argmax,
        },
    ))
}

fn unpool<T: Scalar>(trace: &PoolTrace, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    maxpool2_backward(&trace.input_shape, &trace.argmax, dy)
}

/// conv0, pool0, conv0x x4 (with optional skips around 1-2 and 3-4), pool1, conv1x x2.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedStages<T> {
    pub conv0: ConvUnit<T>,
    pub conv0x: [ConvUnit<T>; 4],
    pub conv1x: [ConvUnit<T>; 2],
}

#[derive(Debug, Clone)]
pub struct SharedTrace<T> {
    conv0: UnitTrace<T>,
    pool0: PoolTrace,
    conv0x: Vec<UnitTrace<T>>,
    pool1: PoolTrace,
    conv1x: Vec<UnitTrace<T>>,
}

impl<T: Scalar> SharedStages<T> {
    fn new(in_ch: usize, ch: &[usize; 6], rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv0: ConvUnit::new(in_ch, ch[0], 5, rng),
            conv0x: [
                ConvUnit::new(ch[0], ch[1], 3, rng),
                ConvUnit::new(ch[1], ch[1], 3, rng),
                ConvUnit::new(ch[1], ch[1], 3, rng),
                ConvUnit::new(ch[1], ch[1], 3, rng),
            ],
            conv1x: [
                ConvUnit::new(ch[1], ch[2], 3, rng),
                ConvUnit::new(ch[2], ch[2], 3, rng),
            ],
        }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        residual: bool,
    ) -> Result<(Tensor<T>, SharedTrace<T>), TensorError> {
        let (a, t0) = self.conv0.forward(x)?;
        let (mut h, p0) = pool(&a)?;
        let mut t0x = Vec::with_capacity(4);
        for pair in self.conv0x.chunks(2) {
            let (h1, ta) = pair[0].forward(&h)?;
            let (h2, tb) = pair[1].forward(&h1)?;
            t0x.push(ta);
            t0x.push(tb);
            h = if residual { residual_add(&h2, &h)? } else { h2 };
        }
        let (mut c, p1) = pool(&h)?;
        let mut t1x = Vec::with_capacity(2);
        for unit in &self.conv1x {
            let (next, t) = unit.forward(&c)?;
            t1x.push(t);
            c = next;
        }
        Ok((
            c,
            SharedTrace {
                conv0: t0,
                pool0: p0,
                conv0x: t0x,
                pool1: p1,
                conv1x: t1x,
            },
        ))
    }

    fn backward(
        &mut self,
        trace: &SharedTrace<T>,
        dy: &Tensor<T>,
        residual: bool,
    ) -> Result<Tensor<T>, TensorError> {
        let mut g = dy.clone();
        for (unit, t) in self.conv1x.iter_mut().zip(&trace.conv1x).rev() {
            g = unit.backward(t, &g)?;
        }
        let mut g = unpool(&trace.pool1, &g)?;
        for (pair_idx, pair) in self.conv0x.chunks_mut(2).enumerate().rev() {
            let (ta, tb) = (&trace.conv0x[2 * pair_idx], &trace.conv0x[2 * pair_idx + 1]);
            let g_main = pair[1].backward(tb, &g)?;
            let g_main = pair[0].backward(ta, &g_main)?;
            g = if residual {
                let mut total = g_main;
                total.add_assign(&g)?;
                total
            } else {
                g_main
            };
        }
        let g = unpool(&trace.pool0, &g)?;
        self.conv0.backward(&trace.conv0, &g)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = self.conv0.params_mut("shared.conv0");
        for (i, u) in self.conv0x.iter_mut().enumerate() {
            out.extend(u.params_mut(&format!("shared.conv0x_{}", i + 1)));
        }
        for (i, u) in self.conv1x.iter_mut().enumerate() {
            out.extend(u.params_mut(&format!("shared.conv1x_{}", i + 1)));
        }
        out
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = self.conv0.params("shared.conv0");
        for (i, u) in self.conv0x.iter().enumerate() {
            out.extend(u.params(&format!("shared.conv0x_{}", i + 1)));
        }
        for (i, u) in self.conv1x.iter().enumerate() {
            out.extend(u.params(&format!("shared.conv1x_{}", i + 1)));
        }
        out
    }
}

/// Per-view stages: conv2x x3, pool2, conv31, conv32.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStages<T> {
    pub conv2x: [ConvUnit<T>; 3],
    pub conv31: ConvUnit<T>,
    pub conv32: ConvUnit<T>,
}

#[derive(Debug, Clone)]
pub struct StreamTrace<T> {
    conv2x: Vec<UnitTrace<T>>,
    pool2: PoolTrace,
    conv31: UnitTrace<T>,
    conv32: UnitTrace<T>,
    map_shape: Vec<usize>,
}

impl<T: Scalar> StreamStages<T> {
    fn new(ch: &[usize; 6], rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv2x: [
                ConvUnit::new(ch[2], ch[3], 3, rng),
                ConvUnit::new(ch[3], ch[3], 3, rng),
                ConvUnit::new(ch[3], ch[3], 3, rng),
            ],
            conv31: ConvUnit::new(ch[3], ch[4], 3, rng),
            conv32: ConvUnit::new(ch[4], ch[5], 3, rng),
        }
    }

    /// Returns the flattened `[N, features]` stream output.
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StreamTrace<T>), TensorError> {
        let mut h = x.clone();
        let mut t2x = Vec::with_capacity(3);
        for unit in &self.conv2x {
            let (next, t) = unit.forward(&h)?;
            t2x.push(t);
            h = next;
        }
        let (p, p2) = pool(&h)?;
        let (e1, t31) = self.conv31.forward(&p)?;
        let (e2, t32) = self.conv32.forward(&e1)?;
        let map_shape = e2.shape().to_vec();
        let n = map_shape[0];
        let flat = e2.reshape(&[n, map_shape[1..].iter().product()])?;
        Ok((
            flat,
            StreamTrace {
                conv2x: t2x,
                pool2: p2,
                conv31: t31,
                conv32: t32,
                map_shape,
            },
        ))
    }

    fn backward(&mut self, trace: &StreamTrace<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let g = dy.clone().reshape(&trace.map_shape)?;
        let g = self.conv32.backward(&trace.conv32, &g)?;
        let g = self.conv31.backward(&trace.conv31, &g)?;
        let mut g = unpool(&trace.pool2, &g)?;
        for (unit, t) in self.conv2x.iter_mut().zip(&trace.conv2x).rev() {
            g = unit.backward(t, &g)?;
        }
        Ok(g)
    }

    fn params_mut(&mut self, side: &str) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, u) in self.conv2x.iter_mut().enumerate() {
            out.extend(u.params_mut(&format!("{side}.conv2x_{}", i + 1)));
        }
        out.extend(self.conv31.params_mut(&format!("{side}.conv31")));
        out.extend(self.conv32.params_mut(&format!("{side}.conv32")));
        out
    }

    fn params(&self, side: &str) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, u) in self.conv2x.iter().enumerate() {
            out.extend(u.params(&format!("{side}.conv2x_{}", i + 1)));
        }
        out.extend(self.conv31.params(&format!("{side}.conv31")));
        out.extend(self.conv32.params(&format!("{side}.conv32")));
        out
    }
}

/// fc1, PReLU, fc2, PReLU, fc3 (linear output).
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub fc1: Linear<T>,
    pub act1: PRelu<T>,
    pub fc2: Linear<T>,
    pub act2: PRelu<T>,
    pub fc3: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    input: Tensor<T>,
    z1: Tensor<T>,
    a1: Tensor<T>,
    z2: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    fn new(in_dim: usize, zero_out: bool, rng: &mut ChaCha8Rng) -> Self {
        let fc1 = Linear::new(in_dim, FC_SIZES[0], rng);
        let fc2 = Linear::new(FC_SIZES[0], FC_SIZES[1], rng);
        let fc3 = if zero_out {
            Linear::zeroed(FC_SIZES[1], FC_SIZES[2])
        } else {
            Linear::new(FC_SIZES[1], FC_SIZES[2], rng)
        };
        Self {
            fc1,
            act1: PRelu::new(FC_SIZES[0]),
            fc2,
            act2: PRelu::new(FC_SIZES[1]),
            fc3,
        }
    }

    fn forward(&self, x: Tensor<T>) -> Result<(Tensor<T>, HeadTrace<T>), TensorError> {
        let z1 = self.fc1.forward(&x)?;
        let a1 = self.act1.forward(&z1)?;
        let z2 = self.fc2.forward(&a1)?;
        let a2 = self.act2.forward(&z2)?;
        let out = self.fc3.forward(&a2)?;
        Ok((
            out,
            HeadTrace {
                input: x,
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    fn backward(&mut self, t: &HeadTrace<T>, dy: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let g = self.fc3.backward(&t.a2, dy)?;
        let g = self.act2.backward(&t.z2, &g)?;
        let g = self.fc2.backward(&t.a1, &g)?;
        let g = self.act1.backward(&t.z1, &g)?;
        self.fc1.backward(&t.input, &g)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("head.fc1.weight".into(), &mut self.fc1.weight),
            ("head.fc1.bias".into(), &mut self.fc1.bias),
            ("head.fc1.slope".into(), &mut self.act1.slopes),
            ("head.fc2.weight".into(), &mut self.fc2.weight),
            ("head.fc2.bias".into(), &mut self.fc2.bias),
            ("head.fc2.slope".into(), &mut self.act2.slopes),
            ("head.fc3.weight".into(), &mut self.fc3.weight),
            ("head.fc3.bias".into(), &mut self.fc3.bias),
        ]
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![
            ("head.fc1.weight".into(), &self.fc1.weight),
            ("head.fc1.bias".into(), &self.fc1.bias),
            ("head.fc1.slope".into(), &self.act1.slopes),
            ("head.fc2.weight".into(), &self.fc2.weight),
            ("head.fc2.bias".into(), &self.fc2.bias),
            ("head.fc2.slope".into(), &self.act2.slopes),
            ("head.fc3.weight".into(), &self.fc3.weight),
            ("head.fc3.bias".into(), &self.fc3.bias),
        ]
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    shared_left: SharedTrace<T>,
    shared_right: SharedTrace<T>,
    left: StreamTrace<T>,
    right: StreamTrace<T>,
    head: HeadTrace<T>,
    stream_features: usize,
}

impl<T: Scalar> ForwardTrace<T> {
    /// The side of every PReLU kink each unit sits on plus the winner of every
    /// pooling window. Two forward passes with equal patterns took the same
    /// linear branch everywhere.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut signs = |t: &Tensor<T>| out.extend(t.data().iter().map(|&v| usize::from(v <= T::zero())));
        for shared in [&self.shared_left, &self.shared_right] {
            signs(&shared.conv0.pre);
            shared.conv0x.iter().for_each(|u| signs(&u.pre));
            shared.conv1x.iter().for_each(|u| signs(&u.pre));
        }
        for stream in [&self.left, &self.right] {
            stream.conv2x.iter().for_each(|u| signs(&u.pre));
            signs(&stream.conv31.pre);
            signs(&stream.conv32.pre);
        }
        signs(&self.head.z1);
        signs(&self.head.z2);
        for shared in [&self.shared_left, &self.shared_right] {
            out.extend_from_slice(&shared.pool0.argmax);
            out.extend_from_slice(&shared.pool1.argmax);
        }
        for stream in [&self.left, &self.right] {
            out.extend_from_slice(&stream.pool2.argmax);
        }
        out
    }
}

/// Gradients with respect to the network inputs.
#[derive(Debug, Clone)]
pub struct InputGrads<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub shared: SharedStages<T>,
    pub left: StreamStages<T>,
    pub right: StreamStages<T>,
    pub head: Head<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let ch = config.channels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = SharedStages::new(config.in_channels(), &ch, &mut rng);
        let left = StreamStages::new(&ch, &mut rng);
        let right = StreamStages::new(&ch, &mut rng);
        let head = Head::new(2 * config.stream_features()?, config.zero_init_head, &mut rng);
        Ok(Self {
            config: config.clone(),
            shared,
            left,
            right,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Toggles the triangulation stage; it has no parameters.
    pub fn set_attach_bdm(&mut self, attach: bool) {
        self.config.attach_bdm = attach;
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.input_size;
        [batch, self.config.in_channels(), s, s]
    }

    fn check_inputs(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<(), ModelError> {
        let n = left.shape().first().copied().unwrap_or(0);
        let expected = self.input_shape(n);
        left.expect_shape("model input (left)", &expected)?;
        right.expect_shape("model input (right)", &expected)?;
        Ok(())
    }

    /// Network output in crop-normalized pixel-triplet units, `[N, 18]`.
    pub fn forward_pixels(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_traced(left, right)?.0)
    }

    pub fn forward_traced(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        self.check_inputs(left, right)?;
        let residual = self.config.use_residual;
        let (sl, shared_left) = self.shared.forward(left, residual)?;
        let (sr, shared_right) = self.shared.forward(right, residual)?;
        let (fl, left_trace) = self.left.forward(&sl)?;
        let (fr, right_trace) = self.right.forward(&sr)?;
        let stream_features = fl.dim(1);
        let (out, head) = self.head.forward(Tensor::concat_cols(&fl, &fr)?)?;
        Ok((
            out,
            ForwardTrace {
                shared_left,
                shared_right,
                left: left_trace,
                right: right_trace,
                head,
                stream_features,
            },
        ))
    }

    /// Accumulates parameter gradients for `grad_out` (gradient w.r.t. the `[N, 18]` output).
    pub fn backward(
        &mut self,
        trace: &ForwardTrace<T>,
        grad_out: &Tensor<T>,
    ) -> Result<InputGrads<T>, ModelError> {
        let residual = self.config.use_residual;
        let g = self.head.backward(&trace.head, grad_out)?;
        let (gl, gr) = g.split_cols(trace.stream_features)?;
        let gl = self.left.backward(&trace.left, &gl)?;
        let gr = self.right.backward(&trace.right, &gr)?;
        let left = self.shared.backward(&trace.shared_left, &gl, residual)?;
        let right = self.shared.backward(&trace.shared_right, &gr, residual)?;
        Ok(InputGrads { left, right })
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = self.shared.params();
        out.extend(self.left.params("left"));
        out.extend(self.right.params("right"));
        out.extend(self.head.params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = self.shared.params_mut();
        out.extend(self.left.params_mut("left"));
        out.extend(self.right.params_mut("right"));
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.named_params()
            .iter()
            .map(|(_, p)| p.grad.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters (values, gradients, momentum) in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let unit = |u: &ConvUnit<T>| ConvUnit {
            conv: Conv2d {
                weight: u.conv.weight.cast(),
                bias: u.conv.bias.cast(),
            },
            act: PRelu {
                slopes: u.act.slopes.cast(),
            },
        };
        let linear = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let stream = |s: &StreamStages<T>| StreamStages {
            conv2x: [unit(&s.conv2x[0]), unit(&s.conv2x[1]), unit(&s.conv2x[2])],
            conv31: unit(&s.conv31),
            conv32: unit(&s.conv32),
        };
        Model {
            config: self.config.clone(),
            shared: SharedStages {
                conv0: unit(&self.shared.conv0),
                conv0x: [
                    unit(&self.shared.conv0x[0]),
                    unit(&self.shared.conv0x[1]),
                    unit(&self.shared.conv0x[2]),
                    unit(&self.shared.conv0x[3]),
                ],
                conv1x: [unit(&self.shared.conv1x[0]), unit(&self.shared.conv1x[1])],
            },
            left: stream(&self.left),
            right: stream(&self.right),
            head: Head {
                fc1: linear(&self.head.fc1),
                act1: PRelu {
                    slopes: self.head.act1.slopes.cast(),
                },
                fc2: linear(&self.head.fc2),
                act2: PRelu {
                    slopes: self.head.act2.slopes.cast(),
                },
                fc3: linear(&self.head.fc3),
            },
        }
    }

    /// The instantiated layer table, read back from the built parameters.
    pub fn layer_table(&self) -> Vec<LayerRow> {
        let conv = |name, units: &[&ConvUnit<T>], sharing| {
            let first = units[0];
            assert!(units
                .iter()
                .all(|u| u.conv.out_channels() == first.conv.out_channels()
                    && u.conv.kernel() == first.conv.kernel()));
            LayerRow {
                name,
                kind: LayerKind::Conv {
                    out_channels: first.conv.out_channels(),
                    kernel: first.conv.kernel(),
                    repeat: units.len(),
                },
                sharing,
            }
        };
        let pool = |name, sharing| LayerRow {
            name,
            kind: LayerKind::Pool { size: 2 },
            sharing,
        };
        let fc = |name, l: &Linear<T>| LayerRow {
            name,
            kind: LayerKind::Fc { out: l.out_dim() },
            sharing: Sharing::Fused,
        };
        let s = &self.shared;
        let l = &self.left;
        vec![
            conv("conv0", &[&s.conv0], Sharing::Shared),
            pool("pool0", Sharing::Shared),
            conv("conv0x", &s.conv0x.iter().collect::<Vec<_>>(), Sharing::Shared),
            pool("pool1", Sharing::Shared),
            conv("conv1x", &s.conv1x.iter().collect::<Vec<_>>(), Sharing::Shared),
            conv("conv2x", &l.conv2x.iter().collect::<Vec<_>>(), Sharing::Separate),
            pool("pool2", Sharing::Separate),
            conv("conv31", &[&l.conv31], Sharing::Separate),
            conv("conv32", &[&l.conv32], Sharing::Separate),
            fc("fc1", &self.head.fc1),
            fc("fc2", &self.head.fc2),
            fc("fc3", &self.head.fc3),
        ]
    }
}

/// Number of scalar parameters (weights, biases and PReLU slopes) of a configuration.
pub fn param_count(config: &ModelConfig) -> Result<usize, ModelError> {
    // Counted from the instantiated model so the two can never drift apart.
    Ok(Model::<f32>::build(config, 0)?.param_count())
}
