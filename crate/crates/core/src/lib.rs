//! Two-stream binocular fingertip network.
//!
//! A convolutional network reads a rectified stereo pair (gray + mask
//! channels per view) and regresses, for five fingertips and the palm root,
//! the mean column, disparity and row of each joint. A parameter-free
//! triangulation layer turns those pixel triplets into metric 3D positions and
//! back-propagates through the rectified stereo equations, so the network can
//! be fine-tuned end to end on 3D targets after a pixel-space pretraining phase.
//!
//! Module map:
//!
//! - [`geometry`]: stereo rig, projection, triangulation and its gradient.
//! - [`tensor`], [`nn`]: dense tensors and layer kernels with exact backward passes.
//! - [`model`]: the two-stream architecture, crop bookkeeping, checkpoints.
//! - [`data`]: synthetic scene sampling, rendering, cropping, dataset files.
//! - [`train`]: two-phase training, metrics and the ablation ladder.

pub mod config;
pub mod data;
pub mod geometry;
pub mod gradient_suite;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use geometry::{PixelTriplet, Point3D, StereoPixelPair, StereoRig};
pub use tensor::{Scalar, Tensor, TensorError};
