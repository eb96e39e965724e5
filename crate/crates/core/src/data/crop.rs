//! Per-view crops centred on the joint centroid, resampled to the network input.

use serde::{Deserialize, Serialize};

use super::render::Image;
use super::scene::clamp_window;
use super::DataError;
use crate::geometry::{pixels_to_triplet, PixelTriplet, Point3D, StereoPixelPair};
use crate::model::{normalize_triplet, CropMeta, NUM_JOINTS, OUTPUT_DIM};
use crate::tensor::Tensor;

/// Source crop sizes in full-frame pixels.
pub const SCALE_CHOICES: [usize; 3] = [240, 200, 160];
/// Scale used when augmentation is off.
pub const DEFAULT_SCALE: usize = 240;

/// One network-ready stereo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, n, n]`: gray, then the mask when enabled.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub label_px: [PixelTriplet; NUM_JOINTS],
    pub label_3d: [Point3D; NUM_JOINTS],
    pub label_norm: [f64; OUTPUT_DIM],
    pub meta: CropMeta,
    pub scene_id: String,
    pub scale_choice: usize,
}

/// Crop windows for one stereo pair at one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindows {
    pub offset_l: f64,
    pub offset_r: f64,
    pub offset_y: f64,
    pub size: f64,
}

/// Windows centred on each view's joint centroid, sharing the vertical offset.
pub fn crop_windows(
    pairs: &[StereoPixelPair; NUM_JOINTS],
    size: usize,
    frame_w: f64,
    frame_h: f64,
) -> Result<CropWindows, DataError> {
    let n = NUM_JOINTS as f64;
    let s = size as f64;
    let cu_l = pairs.iter().map(|p| p.u_l).sum::<f64>() / n;
    let cu_r = pairs.iter().map(|p| p.u_r).sum::<f64>() / n;
    let cv = pairs.iter().map(|p| (p.v_l + p.v_r) / 2.0).sum::<f64>() / n;
    let w = CropWindows {
        offset_l: clamp_window(cu_l, s, frame_w),
        offset_r: clamp_window(cu_r, s, frame_w),
        offset_y: clamp_window(cv, s, frame_h),
        size: s,
    };
    let within = |u: f64, o: f64| u >= o && u <= o + s;
    for (joint, p) in pairs.iter().enumerate() {
        let ok = within(p.u_l, w.offset_l)
            && within(p.u_r, w.offset_r)
            && within(p.v_l, w.offset_y)
            && within(p.v_r, w.offset_y);
        if !ok {
            return Err(DataError::OutsideCrop { joint, size });
        }
    }
    Ok(w)
}

/// Bilinear sample at full-frame position `(x, y)`, replicating the image edge.
fn bilinear(img: &Image, x: f64, y: f64) -> f32 {
    let w = img.window;
    let lx = (x - w.x0 as f64).clamp(0.0, (w.width - 1) as f64);
    let ly = (y - w.y0 as f64).clamp(0.0, (w.height - 1) as f64);
    let (x0, y0) = (lx.floor() as usize, ly.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w.width - 1), (y0 + 1).min(w.height - 1));
    let (fx, fy) = ((lx - x0 as f64) as f32, (ly - y0 as f64) as f32);
    let at = |xx: usize, yy: usize| img.data[yy * w.width + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the `size`-pixel window at `(ox, oy)` to `n x n`. Output pixel
/// `i` takes the source position `o + (i + 1/2) size / n`, so a crop pixel
/// centre sits at normalized coordinate `(i + 1/2) / n` at every scale.
pub fn resample(img: &Image, ox: f64, oy: f64, size: f64, n: usize, binary: bool) -> Vec<f32> {
    let step = size / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        let y = oy + (j as f64 + 0.5) * step;
        for i in 0..n {
            let v = bilinear(img, ox + (i as f64 + 0.5) * step, y);
            out.push(if binary { f32::from(u8::from(v >= 0.5)) } else { v });
        }
    }
    out
}

/// Crops both views at `scale_choice` and resamples them to `input_size`.
///
/// `left` and `right` are `[gray, mask]`. The mask is resampled bilinearly and
/// thresholded at one half so it stays binary.
#[allow(clippy::too_many_arguments)]
pub fn crop_multiscale(
    left: [&Image; 2],
    right: [&Image; 2],
    pairs: &[StereoPixelPair; NUM_JOINTS],
    label_3d: &[Point3D; NUM_JOINTS],
    frame: (f64, f64),
    scale_choice: usize,
    input_size: usize,
    use_mask: bool,
    scene_id: &str,
) -> Result<Sample, DataError> {
    if !SCALE_CHOICES.contains(&scale_choice) {
        return Err(DataError::Invalid(format!(
            "scale choice {scale_choice} not in {SCALE_CHOICES:?}"
        )));
    }
    let win = crop_windows(pairs, scale_choice, frame.0, frame.1)?;
    let channels = if use_mask { 2 } else { 1 };
    let view = |imgs: [&Image; 2], ox: f64| {
        let mut data = resample(imgs[0], ox, win.offset_y, win.size, input_size, false);
        if use_mask {
            data.extend(resample(imgs[1], ox, win.offset_y, win.size, input_size, true));
        }
        Tensor::from_vec(&[channels, input_size, input_size], data).expect("sized by construction")
    };
    let meta = CropMeta {
        offset_l: win.offset_l,
        offset_r: win.offset_r,
        offset_y: win.offset_y,
        scale: win.size / input_size as f64,
        input_size,
    };
    let label_px = pairs.map(|p| pixels_to_triplet(&p));
    let mut label_norm = [0.0; OUTPUT_DIM];
    for (j, trip) in label_px.iter().enumerate() {
        label_norm[3 * j..3 * j + 3].copy_from_slice(&normalize_triplet(trip, &meta));
    }
    Ok(Sample {
        left: view(left, win.offset_l),
        right: view(right, win.offset_r),
        label_px,
        label_3d: *label_3d,
        label_norm,
        meta,
        scene_id: scene_id.to_string(),
        scale_choice,
    })
}
