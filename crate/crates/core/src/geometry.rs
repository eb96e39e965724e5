//! Rectified pinhole stereo model.
//!
//! Coordinates follow one convention throughout the crate: pixel `(u, v)` has
//! its centre at integer coordinates, `u` grows to the right and `v` grows
//! downwards. Metric points live in a frame centred between the two cameras,
//! with `z` along the (parallel) optical axes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest disparity (pixels) accepted by the triangulation layer.
pub const DEFAULT_Q_MIN: f64 = 4.0;
/// Largest disparity (pixels) accepted by the triangulation layer.
pub const DEFAULT_Q_MAX: f64 = 400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
    #[error("point depth must be positive, got z = {0}")]
    NonPositiveDepth(f64),
    #[error("disparity {q} outside the accepted range [{min}, {max}]")]
    DisparityOutOfRange { q: f64, min: f64, max: f64 },
}

/// Intrinsics of a rectified stereo pair.
///
/// `f` and `lambda` only ever appear as the ratio `f / lambda`, the focal
/// length in pixels, but both are kept so that rig files carry the physical
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    /// Focal length in millimetres.
    pub f: f64,
    /// Baseline between the camera centres in millimetres.
    pub b: f64,
    /// Sensor pitch in millimetres per pixel.
    pub lambda: f64,
    /// Image width in pixels.
    pub w: f64,
    /// Image height in pixels.
    pub h: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            f: 4.0,
            b: 40.0,
            lambda: 0.01,
            w: 640.0,
            h: 480.0,
        }
    }
}

impl StereoRig {
    pub fn new(f: f64, b: f64, lambda: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let rig = Self { f, b, lambda, w, h };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, value) in [
            ("f", self.f),
            ("b", self.b),
            ("lambda", self.lambda),
            ("w", self.w),
            ("h", self.h),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeometryError::InvalidRig(format!(
                    "{name} must be finite and positive, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Focal length expressed in pixels.
    pub fn focal_px(&self) -> f64 {
        self.f / self.lambda
    }

    /// Pixel disparity of a point at depth `z`.
    pub fn disparity_at(&self, z: f64) -> f64 {
        self.f * self.b / (self.lambda * z)
    }

    pub fn width_px(&self) -> usize {
        self.w.round() as usize
    }

    pub fn height_px(&self) -> usize {
        self.h.round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3D) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Positions of one point in the left and right images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoPixelPair {
    pub u_l: f64,
    pub v_l: f64,
    pub u_r: f64,
    pub v_r: f64,
}

impl StereoPixelPair {
    pub fn to_array(self) -> [f64; 4] {
        [self.u_l, self.v_l, self.u_r, self.v_r]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            u_l: a[0],
            v_l: a[1],
            u_r: a[2],
            v_r: a[3],
        }
    }
}

/// Per-joint regression target: mean column `s`, disparity `q`, mean row `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelTriplet {
    pub s: f64,
    pub q: f64,
    pub t: f64,
}

impl PixelTriplet {
    pub const fn new(s: f64, q: f64, t: f64) -> Self {
        Self { s, q, t }
    }

    /// Metric disparity on the sensor, in millimetres.
    pub fn metric_disparity(&self, rig: &StereoRig) -> f64 {
        rig.lambda * self.q
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.q, self.t]
    }
}

/// Projects a point into both views of a rectified rig.
pub fn project_point(rig: &StereoRig, p: &Point3D) -> Result<StereoPixelPair, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    let k = rig.focal_px() / p.z;
    let half_b = rig.b / 2.0;
    let v = rig.h / 2.0 + k * p.y;
    Ok(StereoPixelPair {
        u_l: rig.w / 2.0 + k * (p.x + half_b),
        v_l: v,
        u_r: rig.w / 2.0 + k * (p.x - half_b),
        v_r: v,
    })
}

pub fn pixels_to_triplet(pair: &StereoPixelPair) -> PixelTriplet {
    PixelTriplet {
        s: (pair.u_l + pair.u_r) / 2.0,
        q: pair.u_l - pair.u_r,
        t: (pair.v_l + pair.v_r) / 2.0,
    }
}

/// How the triangulation layer treats disparities outside `[q_min, q_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuardMode {
    /// Clamp into range and block the disparity gradient.
    #[default]
    Clamp,
    /// Reject out-of-range disparities.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityGuard {
    pub q_min: f64,
    pub q_max: f64,
    pub mode: GuardMode,
}

impl Default for DisparityGuard {
    fn default() -> Self {
        Self {
            q_min: DEFAULT_Q_MIN,
            q_max: DEFAULT_Q_MAX,
            mode: GuardMode::Clamp,
        }
    }
}

impl DisparityGuard {
    pub fn strict() -> Self {
        Self {
            mode: GuardMode::Strict,
            ..Self::default()
        }
    }

    /// Returns the disparity to evaluate with, and whether it was clamped.
    pub fn apply(&self, q: f64) -> Result<(f64, bool), GeometryError> {
        if q >= self.q_min && q <= self.q_max {
            return Ok((q, false));
        }
        match self.mode {
            GuardMode::Strict => Err(GeometryError::DisparityOutOfRange {
                q,
                min: self.q_min,
                max: self.q_max,
            }),
            // NaN lands on q_min; the caller sees the clamp flag either way.
            GuardMode::Clamp => Ok((q.max(self.q_min).min(self.q_max), true)),
        }
    }
}

/// Result of triangulating one triplet through the guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Point3D,
    /// Disparity actually used in the evaluation.
    pub q_used: f64,
    pub clamped: bool,
}

/// Unguarded triangulation of a pixel triplet.
///
/// `z = f b / (lambda q)`, `x = (s - w/2) lambda z / f`,
/// `y = (t - h/2) lambda z / f`.
pub fn triangulate(rig: &StereoRig, trip: &PixelTriplet) -> Point3D {
    let z = rig.f * rig.b / (rig.lambda * trip.q);
    let k = rig.lambda * z / rig.f;
    Point3D {
        x: (trip.s - rig.w / 2.0) * k,
        y: (trip.t - rig.h / 2.0) * k,
        z,
    }
}

/// Forward pass of the binocular distance measurement mapping.
pub fn bdm_forward(
    rig: &StereoRig,
    trip: &PixelTriplet,
    guard: &DisparityGuard,
) -> Result<Triangulated, GeometryError> {
    let (q_used, clamped) = guard.apply(trip.q)?;
    let point = triangulate(rig, &PixelTriplet { q: q_used, ..*trip });
    Ok(Triangulated {
        point,
        q_used,
        clamped,
    })
}

/// Gradient of the loss with respect to `(s, q, t)` given the gradient with
/// respect to `(x, y, z)`.
///
/// Clamped disparities pass no gradient to `q`; `s` and `t` still receive
/// theirs, evaluated at the clamped depth.
pub fn bdm_backward(
    rig: &StereoRig,
    trip: &PixelTriplet,
    guard: &DisparityGuard,
    grad_out: [f64; 3],
) -> Result<[f64; 3], GeometryError> {
    let tri = bdm_forward(rig, trip, guard)?;
    let Point3D { x, y, z } = tri.point;
    let [gx, gy, gz] = grad_out;
    let k = rig.lambda * z / rig.f;
    let gq = if tri.clamped {
        0.0
    } else {
        -(k / rig.b) * (x * gx + y * gy + z * gz)
    };
    Ok([gx * k, gq, gy * k])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> StereoRig {
        StereoRig::default()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn on_axis_projection() {
        let p = project_point(&rig(), &Point3D::new(0.0, 0.0, 400.0)).unwrap();
        assert_eq!(p.to_array(), [340.0, 240.0, 300.0, 240.0]);
    }

    #[test]
    fn off_axis_projection() {
        let p = project_point(&rig(), &Point3D::new(50.0, -30.0, 350.0)).unwrap();
        assert!(close(p.u_l, 400.0, 1e-12));
        assert!(close(p.u_r, 354.285_714_285_714_3, 1e-12));
        assert!(close(p.v_l, 205.714_285_714_285_7, 1e-12));
        assert_eq!(p.v_l, p.v_r);
    }

    #[test]
    fn axis_disparity_matches_formula() {
        let r = StereoRig::new(3.0, 55.0, 0.006, 800.0, 600.0).unwrap();
        for z in [150.0, 333.3, 900.0] {
            let p = project_point(&r, &Point3D::new(0.0, 0.0, z)).unwrap();
            assert!(close(p.u_l - p.u_r, r.f * r.b / (r.lambda * z), 1e-12));
            assert_eq!(p.v_l, r.h / 2.0);
        }
    }

    #[test]
    fn non_positive_depth_rejected() {
        assert!(matches!(
            project_point(&rig(), &Point3D::new(0.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project_point(&rig(), &Point3D::new(1.0, 1.0, -5.0)).is_err());
    }

    #[test]
    fn triplet_arithmetic() {
        let t = pixels_to_triplet(&StereoPixelPair::from_array([340.0, 240.0, 300.0, 240.0]));
        assert_eq!(t, PixelTriplet::new(320.0, 40.0, 240.0));
        let p = project_point(&rig(), &Point3D::new(50.0, -30.0, 350.0)).unwrap();
        let t = pixels_to_triplet(&p);
        assert!(close(t.s, 377.142_857_142_857, 1e-12));
        assert!(close(t.q, 45.714_285_714_285_7, 1e-12));
        assert!(close(t.t, 205.714_285_714_285_7, 1e-12));
        let flat = pixels_to_triplet(&StereoPixelPair::from_array([10.0, 5.0, 10.0, 5.0]));
        assert_eq!(flat.q, 0.0);
        assert!(bdm_forward(&rig(), &flat, &DisparityGuard::strict()).is_err());
    }

    #[test]
    fn forward_examples() {
        let g = DisparityGuard::strict();
        let p = bdm_forward(&rig(), &PixelTriplet::new(320.0, 40.0, 240.0), &g).unwrap();
        assert_eq!(p.point, Point3D::new(0.0, 0.0, 400.0));
        let pair = project_point(&rig(), &Point3D::new(50.0, -30.0, 350.0)).unwrap();
        let p = bdm_forward(&rig(), &pixels_to_triplet(&pair), &g).unwrap().point;
        assert!(close(p.x, 50.0, 1e-12) && close(p.y, -30.0, 1e-12) && close(p.z, 350.0, 1e-12));
        let p = bdm_forward(&rig(), &PixelTriplet::new(320.0, 25.0, 240.0), &g).unwrap().point;
        assert_eq!((p.x, p.y), (0.0, 0.0));
        assert!(close(p.z, 4.0 * 40.0 / (0.01 * 25.0), 1e-15));
    }

    #[test]
    fn backward_examples() {
        let g = DisparityGuard::default();
        let trip = PixelTriplet::new(320.0, 40.0, 240.0);
        assert_eq!(bdm_backward(&rig(), &trip, &g, [0.0; 3]).unwrap(), [0.0, -0.0, 0.0]);
        let dz = bdm_backward(&rig(), &trip, &g, [0.0, 0.0, 1.0]).unwrap();
        assert!(close(dz[1], -10.0, 1e-12));
        let dx = bdm_backward(&rig(), &trip, &g, [1.0, 0.0, 0.0]).unwrap();
        assert!(close(dx[0], 1.0, 1e-12));
    }

    #[test]
    fn guard_policy() {
        let clamp = DisparityGuard::default();
        let trip = PixelTriplet::new(300.0, 1.0, 200.0);
        let tri = bdm_forward(&rig(), &trip, &clamp).unwrap();
        assert!(tri.clamped);
        assert_eq!(tri.q_used, DEFAULT_Q_MIN);
        let grad = bdm_backward(&rig(), &trip, &clamp, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(grad[1], 0.0);
        assert!(grad[0] != 0.0 && grad[2] != 0.0);
        let far = PixelTriplet::new(300.0, 1000.0, 200.0);
        assert_eq!(bdm_forward(&rig(), &far, &clamp).unwrap().q_used, DEFAULT_Q_MAX);
        assert!(matches!(
            bdm_forward(&rig(), &far, &DisparityGuard::strict()),
            Err(GeometryError::DisparityOutOfRange { .. })
        ));
        let nan = PixelTriplet::new(300.0, f64::NAN, 200.0);
        assert!(bdm_forward(&rig(), &nan, &clamp).unwrap().point.z.is_finite());
    }

    #[test]
    fn invalid_rig() {
        assert!(StereoRig::new(0.0, 40.0, 0.01, 640.0, 480.0).is_err());
        assert!(StereoRig::new(4.0, 40.0, f64::NAN, 640.0, 480.0).is_err());
    }
}
