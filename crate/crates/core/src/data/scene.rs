//! Random hand scenes: a palm root and five fingertips in the mid-camera frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geometry::{project_point, Point3D, StereoRig};
use crate::model::NUM_JOINTS;

/// Index of the palm root in every joint array.
pub const PALM: usize = 5;
pub const NUM_TIPS: usize = 5;

/// Sampling ranges and acceptance rules. Lengths in millimetres, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub palm_x: (f64, f64),
    pub palm_y: (f64, f64),
    pub palm_z: (f64, f64),
    pub z_near: f64,
    pub z_far: f64,
    pub tip_distance: (f64, f64),
    /// Per-finger palm-to-tip length ranges, thumb first.
    pub finger_length: [(f64, f64); NUM_TIPS],
    /// In-plane finger directions relative to the hand axis.
    pub finger_angle: [f64; NUM_TIPS],
    pub cone_half_angle: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub min_tip_separation: f64,
    pub margin_px: f64,
    /// Every joint must also fit this crop (centred on the view's joint centroid).
    pub fit_crop: f64,
    pub fit_crop_margin: f64,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            palm_x: (-80.0, 80.0),
            palm_y: (-60.0, 60.0),
            palm_z: (250.0, 450.0),
            z_near: 200.0,
            z_far: 500.0,
            tip_distance: (50.0, 110.0),
            finger_length: [(50.0, 80.0), (60.0, 100.0), (65.0, 110.0), (60.0, 100.0), (50.0, 85.0)],
            finger_angle: [-55.0, -22.0, 0.0, 18.0, 36.0],
            cone_half_angle: 20.0,
            roll: 60.0,
            pitch: 35.0,
            yaw: 35.0,
            min_tip_separation: 15.0,
            margin_px: 20.0,
            fit_crop: 160.0,
            fit_crop_margin: 4.0,
            max_attempts: 1000,
        }
    }
}

/// Thumb, index, middle, ring, pinky fingertips followed by the palm root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandScene {
    pub joints: [Point3D; NUM_JOINTS],
    /// In-image rotation of the hand axis (radians); drives the palm ellipse.
    pub roll: f64,
}

/// The first invariant a scene breaks.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Depth { joint: usize, z: f64 },
    TipDistance { tip: usize, distance: f64 },
    TipSeparation { a: usize, b: usize, distance: f64 },
    Margin { joint: usize },
    CropFit { joint: usize },
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Unit vector drawn uniformly from the cone of half-angle `half` (radians) around +y of the local frame.
fn cone_direction(rng: &mut impl Rng, half: f64) -> [f64; 3] {
    let cos_t = rng.random_range(half.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    [sin_t * phi.cos(), cos_t, sin_t * phi.sin()]
}

/// One unconstrained draw.
fn propose(rng: &mut impl Rng, p: &SceneParams) -> HandScene {
    let palm = Point3D::new(
        rng.random_range(p.palm_x.0..=p.palm_x.1),
        rng.random_range(p.palm_y.0..=p.palm_y.1),
        rng.random_range(p.palm_z.0..=p.palm_z.1),
    );
    let roll = symmetric(rng, p.roll.to_radians());
    let pitch = symmetric(rng, p.pitch.to_radians());
    let yaw = symmetric(rng, p.yaw.to_radians());
    let hand = mat_mul(&rot_z(roll), &mat_mul(&rot_x(pitch), &rot_y(yaw)));
    let mut joints = [palm; NUM_JOINTS];
    for tip in 0..NUM_TIPS {
        // Local frame: +y runs from the palm root towards the middle finger
        // (image up is -y), the palm faces the camera along -z.
        let local = cone_direction(rng, p.cone_half_angle.to_radians());
        let len = rng.random_range(p.finger_length[tip].0..=p.finger_length[tip].1);
        let dir = apply(&mat_mul(&hand, &rot_z(p.finger_angle[tip].to_radians())), [local[0], -local[1], local[2]]);
        joints[tip] = Point3D::new(palm.x + len * dir[0], palm.y + len * dir[1], palm.z + len * dir[2]);
    }
    HandScene { joints, roll }
}

/// Origin of a `size` window centred on `centre`, clamped into `[0, extent - size]`.
pub fn clamp_window(centre: f64, size: f64, extent: f64) -> f64 {
    (centre - size / 2.0).clamp(0.0, (extent - size).max(0.0))
}

impl HandScene {
    pub fn palm(&self) -> Point3D {
        self.joints[PALM]
    }

    pub fn tips(&self) -> &[Point3D] {
        &self.joints[..NUM_TIPS]
    }

    /// Checks every scene invariant under `rig`.
    pub fn check(&self, rig: &StereoRig, p: &SceneParams) -> Result<(), Violation> {
        for (joint, q) in self.joints.iter().enumerate() {
            if !(q.z >= p.z_near && q.z <= p.z_far) {
                return Err(Violation::Depth { joint, z: q.z });
            }
        }
        let palm = self.palm();
        for (tip, q) in self.tips().iter().enumerate() {
            let distance = q.distance(&palm);
            if !(distance >= p.tip_distance.0 && distance <= p.tip_distance.1) {
                return Err(Violation::TipDistance { tip, distance });
            }
        }
        for a in 0..NUM_TIPS {
            for b in a + 1..NUM_TIPS {
                let distance = self.joints[a].distance(&self.joints[b]);
                if distance < p.min_tip_separation {
                    return Err(Violation::TipSeparation { a, b, distance });
                }
            }
        }
        let px: Vec<[f64; 4]> = self
            .joints
            .iter()
            .map(|q| project_point(rig, q).map(|pp| pp.to_array()))
            .collect::<Result<_, _>>()
            .map_err(|_| Violation::Depth { joint: 0, z: 0.0 })?;
        let m = p.margin_px;
        for (joint, a) in px.iter().enumerate() {
            let inside = |u: f64, extent: f64| u >= m && u <= extent - 1.0 - m;
            if !(inside(a[0], rig.w) && inside(a[2], rig.w) && inside(a[1], rig.h)) {
                return Err(Violation::Margin { joint });
            }
        }
        let n = NUM_JOINTS as f64;
        let cv = px.iter().map(|a| a[1]).sum::<f64>() / n;
        let oy = clamp_window(cv, p.fit_crop, rig.h);
        for col in [0, 2] {
            let cu = px.iter().map(|a| a[col]).sum::<f64>() / n;
            let ox = clamp_window(cu, p.fit_crop, rig.w);
            for (joint, a) in px.iter().enumerate() {
                let fits = |u: f64, o: f64| u >= o + p.fit_crop_margin && u <= o + p.fit_crop - p.fit_crop_margin;
                if !(fits(a[col], ox) && fits(a[1], oy)) {
                    return Err(Violation::CropFit { joint });
                }
            }
        }
        Ok(())
    }
}

/// Draws scenes until one satisfies every invariant.
pub fn sample_scene(rig: &StereoRig, params: &SceneParams, rng: &mut impl Rng) -> Result<HandScene, DataError> {
    for _ in 0..params.max_attempts {
        let scene = propose(rng, params);
        if scene.check(rig, params).is_ok() {
            return Ok(scene);
        }
    }
    Err(DataError::RejectionBudget {
        attempts: params.max_attempts,
    })
}
