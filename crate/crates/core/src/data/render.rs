//! Stick-figure stereo rendering: palm ellipse, finger bones, fingertip blobs.
//!
//! Everything is drawn scanline by scanline. For each pixel row a primitive
//! reports the continuous horizontal span it covers at the row centre; pixels
//! whose centres fall inside the span are set in the mask, and a span too
//! short to contain a centre still marks its nearest pixel. Whether a row is
//! touched therefore depends only on the vertical geometry, which is the same
//! in both views of a rectified rig. Gray values use the horizontal coverage
//! of each pixel for anti-aliasing.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{HandScene, NUM_TIPS, PALM};
use crate::geometry::{project_point, Point3D, StereoRig};

/// Physical radius of a fingertip blob (mm).
pub const BLOB_RADIUS_MM: f64 = 8.0;
pub const BONE_RADIUS_MM: f64 = 4.5;
pub const PALM_AXES_MM: (f64, f64) = (30.0, 22.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub noise_sigma: f64,
    pub gain: (f64, f64),
    pub background: (f64, f64),
    pub background_sigma: f64,
    pub draw_palm: bool,
    pub draw_bones: bool,
    pub draw_blobs: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            gain: (0.5, 1.5),
            background: (0.05, 0.25),
            background_sigma: 0.03,
            draw_palm: true,
            draw_bones: true,
            draw_blobs: true,
        }
    }
}

impl RenderParams {
    /// Geometry only: no noise, black background, unit gain.
    pub fn clean() -> Self {
        Self {
            noise_sigma: 0.0,
            gain: (1.0, 1.0),
            background: (0.0, 0.0),
            background_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Pixel rectangle of the full frame, in full-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn full(rig: &StereoRig) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: rig.width_px(),
            height: rig.height_px(),
        }
    }
}

/// A single-channel image covering `window`, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub window: Window,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(window: Window) -> Self {
        Self {
            window,
            data: vec![0.0; window.width * window.height],
        }
    }

    /// Value at full-frame pixel `(x, y)`, if inside the window.
    pub fn get(&self, x: i64, y: i64) -> Option<f32> {
        let (cx, cy) = (x - self.window.x0, y - self.window.y0);
        if cx < 0 || cy < 0 || cx as usize >= self.window.width || cy as usize >= self.window.height {
            return None;
        }
        Some(self.data[cy as usize * self.window.width + cx as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub gray: Image,
    pub mask: Image,
    pub gain: f64,
}

/// Left and right renders of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoFrames {
    pub left: RenderedView,
    pub right: RenderedView,
}

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Capsule { a: (f64, f64), b: (f64, f64), r: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, phi: f64 },
}

/// Minimum of a convex function on `[lo, hi]`.
fn ternary_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..60 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f((lo + hi) / 2.0).min(f(lo)).min(f(hi))
}

impl Shape {
    fn rows(&self) -> (f64, f64) {
        match *self {
            Shape::Disc { cy, r, .. } => (cy - r, cy + r),
            Shape::Capsule { a, b, r } => (a.1.min(b.1) - r, a.1.max(b.1) + r),
            Shape::Ellipse { cy, a, .. } => (cy - a, cy + a),
        }
    }

    /// Horizontal extent covered at row `y`.
    fn span(&self, y: f64) -> Option<(f64, f64)> {
        match *self {
            Shape::Disc { cx, cy, r } => {
                let d = r * r - (y - cy) * (y - cy);
                (d >= 0.0).then(|| (cx - d.sqrt(), cx + d.sqrt()))
            }
            Shape::Capsule { a, b, r } => {
                let dy = b.1 - a.1;
                let (t0, t1) = if dy.abs() < 1e-12 {
                    if (y - a.1).abs() > r {
                        return None;
                    }
                    (0.0, 1.0)
                } else {
                    let p = (y - r - a.1) / dy;
                    let q = (y + r - a.1) / dy;
                    (p.min(q).max(0.0), p.max(q).min(1.0))
                };
                if t0 > t1 {
                    return None;
                }
                let half = |t: f64| {
                    let yy = a.1 + t * dy;
                    (r * r - (y - yy) * (y - yy)).max(0.0).sqrt()
                };
                let x = |t: f64| a.0 + t * (b.0 - a.0);
                let lo = ternary_min(|t| x(t) - half(t), t0, t1);
                let hi = -ternary_min(|t| -(x(t) + half(t)), t0, t1);
                Some((lo, hi))
            }
            Shape::Ellipse { cx, cy, a, b, phi } => {
                let (s, c) = phi.sin_cos();
                let yy = y - cy;
                let qa = c * c / (a * a) + s * s / (b * b);
                let qb = 2.0 * yy * s * c * (1.0 / (a * a) - 1.0 / (b * b));
                let qc = yy * yy * (s * s / (a * a) + c * c / (b * b)) - 1.0;
                let disc = qb * qb - 4.0 * qa * qc;
                (disc >= 0.0).then(|| {
                    let root = disc.sqrt();
                    (cx + (-qb - root) / (2.0 * qa), cx + (-qb + root) / (2.0 * qa))
                })
            }
        }
    }
}

/// Brighter when closer.
fn shade(z: f64) -> f64 {
    (1.0 - 0.4 * (z - 200.0) / 300.0).clamp(0.5, 1.0)
}

struct Primitive {
    shape: Shape,
    intensity: f64,
    /// Gaussian falloff of the blob profile (pixels), if any.
    blob: Option<(f64, f64, f64)>,
}

fn u_of(pair: [f64; 4], view: View) -> f64 {
    match view {
        View::Left => pair[0],
        View::Right => pair[2],
    }
}

fn primitives(rig: &StereoRig, scene: &HandScene, view: View, params: &RenderParams) -> Vec<Primitive> {
    let k = rig.focal_px();
    let px = |p: &Point3D| {
        let a = project_point(rig, p).expect("scene depths are positive").to_array();
        (u_of(a, view), a[1])
    };
    let palm = scene.joints[PALM];
    let mut out = Vec::new();
    if params.draw_palm {
        let mean_tip = scene.tips().iter().fold([0.0; 3], |acc, t| {
            [acc[0] + t.x / 5.0, acc[1] + t.y / 5.0, acc[2] + t.z / 5.0]
        });
        let c = Point3D::new(
            palm.x + 0.4 * (mean_tip[0] - palm.x),
            palm.y + 0.4 * (mean_tip[1] - palm.y),
            palm.z + 0.4 * (mean_tip[2] - palm.z),
        );
        let (cx, cy) = px(&c);
        out.push(Primitive {
            shape: Shape::Ellipse {
                cx,
                cy,
                a: k * PALM_AXES_MM.0 / c.z,
                b: k * PALM_AXES_MM.1 / c.z,
                phi: scene.roll - std::f64::consts::FRAC_PI_2,
            },
            intensity: 0.55 * shade(c.z),
            blob: None,
        });
    }
    for tip in &scene.joints[..NUM_TIPS] {
        if params.draw_bones {
            let mid_z = (tip.z + palm.z) / 2.0;
            out.push(Primitive {
                shape: Shape::Capsule {
                    a: px(&palm),
                    b: px(tip),
                    r: k * BONE_RADIUS_MM / mid_z,
                },
                intensity: 0.7 * shade(mid_z),
                blob: None,
            });
        }
        if params.draw_blobs {
            let (cx, cy) = px(tip);
            let r = blob_radius_px(rig, tip.z);
            out.push(Primitive {
                shape: Shape::Disc { cx, cy, r },
                intensity: shade(tip.z),
                blob: Some((cx, cy, r / 2.0)),
            });
        }
    }
    out
}

pub fn blob_radius_px(rig: &StereoRig, z: f64) -> f64 {
    rig.focal_px() * BLOB_RADIUS_MM / z
}

/// Geometry layer of one view: per-pixel coverage-weighted intensity and the binary mask.
fn rasterize(rig: &StereoRig, scene: &HandScene, view: View, window: Window, params: &RenderParams) -> (Image, Image) {
    let mut geom = Image::new(window);
    let mut mask = Image::new(window);
    let x_end = window.x0 + window.width as i64;
    for prim in primitives(rig, scene, view, params) {
        let (top, bottom) = prim.shape.rows();
        let y_lo = (top.ceil() as i64).max(window.y0);
        let y_hi = (bottom.floor() as i64).min(window.y0 + window.height as i64 - 1);
        for y in y_lo..=y_hi {
            let Some((a, b)) = prim.shape.span(y as f64) else {
                continue;
            };
            let (mut first, mut last) = (a.ceil() as i64, b.floor() as i64);
            if first > last {
                first = ((a + b) / 2.0).round() as i64;
                last = first;
            }
            let row = (y - window.y0) as usize * window.width;
            for x in first.max(window.x0)..=last.min(x_end - 1) {
                let idx = row + (x - window.x0) as usize;
                mask.data[idx] = 1.0;
                let cover = ((x as f64 + 0.5).min(b) - (x as f64 - 0.5).max(a)).clamp(0.0, 1.0);
                let profile = match prim.blob {
                    Some((cx, cy, sigma)) => {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        0.6 + 0.4 * (-d2 / (2.0 * sigma * sigma)).exp()
                    }
                    None => 1.0,
                };
                let v = (cover * prim.intensity * profile) as f32;
                if v > geom.data[idx] {
                    geom.data[idx] = v;
                }
            }
        }
    }
    (geom, mask)
}

fn draw_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders one view inside `window`. The mask depends on the scene only; the
/// illumination gain, background and noise come from `rng`.
pub fn render_view(
    rig: &StereoRig,
    scene: &HandScene,
    view: View,
    window: Window,
    params: &RenderParams,
    rng: &mut impl Rng,
) -> RenderedView {
    let (geom, mask) = rasterize(rig, scene, view, window, params);
    let gain = draw_range(rng, params.gain);
    let level = draw_range(rng, params.background);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    let bg_noise = Normal::new(0.0, params.background_sigma.max(0.0)).expect("finite sigma");
    let mut gray = Image::new(window);
    for ((g, &geo), &m) in gray.data.iter_mut().zip(&geom.data).zip(&mask.data) {
        let base = if m > 0.0 {
            geo as f64 * gain
        } else {
            level + bg_noise.sample(rng)
        };
        *g = (base + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    RenderedView { gray, mask, gain }
}

/// Full-frame left and right renders.
pub fn render_views(rig: &StereoRig, scene: &HandScene, params: &RenderParams, rng: &mut impl Rng) -> StereoFrames {
    let window = Window::full(rig);
    StereoFrames {
        left: render_view(rig, scene, View::Left, window, params, rng),
        right: render_view(rig, scene, View::Right, window, params, rng),
    }
}
