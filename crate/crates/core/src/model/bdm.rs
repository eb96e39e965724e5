//! The parameter-free triangulation stage appended to the network.
//!
//! Forward: crop-normalized `(s, q, t)` per joint → full-frame pixels →
//! metric `(x, y, z)`. Backward applies the closed-form triangulation
//! gradient and then the (diagonal, constant) crop Jacobian. All arithmetic
//! here runs in `f64` regardless of the network precision.

use super::{CropMeta, ForwardTrace, InputGrads, Model, ModelError, NUM_JOINTS, OUTPUT_DIM};
use crate::geometry::{bdm_backward, bdm_forward, DisparityGuard, PixelTriplet, Point3D, StereoRig};
use crate::model::crop::denormalize_triplet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdmStage {
    pub rig: StereoRig,
    pub guard: DisparityGuard,
}

impl BdmStage {
    pub fn new(rig: StereoRig) -> Self {
        Self {
            rig,
            guard: DisparityGuard::default(),
        }
    }

    pub fn strict(rig: StereoRig) -> Self {
        Self {
            rig,
            guard: DisparityGuard::strict(),
        }
    }

    /// Triangulates one 18-vector of crop-normalized triplets.
    pub fn triangulate(&self, norm: &[f64], meta: &CropMeta) -> Result<[Point3D; NUM_JOINTS], ModelError> {
        let mut out = [Point3D::new(0.0, 0.0, 0.0); NUM_JOINTS];
        for (j, p) in out.iter_mut().enumerate() {
            let trip = denormalize_triplet([norm[3 * j], norm[3 * j + 1], norm[3 * j + 2]], meta);
            *p = bdm_forward(&self.rig, &trip, &self.guard)?.point;
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(
        &self,
        norm: &Tensor<T>,
        metas: &[CropMeta],
    ) -> Result<(Tensor<T>, BdmTrace), ModelError> {
        let n = norm.dim(0);
        norm.expect_shape("triangulation input", &[n, OUTPUT_DIM])?;
        if metas.len() != n {
            return Err(ModelError::MetaCount {
                batch: n,
                metas: metas.len(),
            });
        }
        let mut out = Tensor::zeros(&[n, OUTPUT_DIM]);
        let mut triplets = Vec::with_capacity(n * NUM_JOINTS);
        let mut clamped = 0;
        for (i, meta) in metas.iter().enumerate() {
            for j in 0..NUM_JOINTS {
                let base = i * OUTPUT_DIM + 3 * j;
                let v = &norm.data()[base..base + 3];
                let trip = denormalize_triplet([v[0].as_f64(), v[1].as_f64(), v[2].as_f64()], meta);
                let tri = bdm_forward(&self.rig, &trip, &self.guard)?;
                clamped += usize::from(tri.clamped);
                for (o, c) in out.data_mut()[base..base + 3].iter_mut().zip(tri.point.to_array()) {
                    *o = T::of(c);
                }
                triplets.push(trip);
            }
        }
        Ok((
            out,
            BdmTrace {
                triplets,
                crop_sizes: metas.iter().map(CropMeta::crop_size).collect(),
                clamped,
            },
        ))
    }

    /// Gradient w.r.t. the crop-normalized network output.
    pub fn backward<T: Scalar>(&self, trace: &BdmTrace, grad_3d: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let n = trace.crop_sizes.len();
        grad_3d.expect_shape("triangulation grad", &[n, OUTPUT_DIM])?;
        let mut g = Tensor::zeros(&[n, OUTPUT_DIM]);
        for (i, &size) in trace.crop_sizes.iter().enumerate() {
            for j in 0..NUM_JOINTS {
                let base = i * OUTPUT_DIM + 3 * j;
                let up = &grad_3d.data()[base..base + 3];
                let gp = bdm_backward(
                    &self.rig,
                    &trace.triplets[i * NUM_JOINTS + j],
                    &self.guard,
                    [up[0].as_f64(), up[1].as_f64(), up[2].as_f64()],
                )?;
                for (o, v) in g.data_mut()[base..base + 3].iter_mut().zip(gp) {
                    *o = T::of(v * size);
                }
            }
        }
        Ok(g)
    }
}

/// Per-batch state kept by [`BdmStage::forward`].
#[derive(Debug, Clone)]
pub struct BdmTrace {
    triplets: Vec<PixelTriplet>,
    crop_sizes: Vec<f64>,
    /// Number of joints whose disparity was clamped by the guard.
    pub clamped: usize,
}

impl BdmTrace {
    /// Full-frame triplets the stage triangulated, joint-major per sample.
    pub fn triplets(&self) -> &[PixelTriplet] {
        &self.triplets
    }
}

/// 3D joint positions `[N, 18]` in millimetres.
pub fn forward_3d<T: Scalar>(
    model: &Model<T>,
    stage: &BdmStage,
    metas: &[CropMeta],
    left: &Tensor<T>,
    right: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    Ok(model.forward_3d_traced(stage, metas, left, right)?.0)
}

impl<T: Scalar> Model<T> {
    pub fn forward_3d_traced(
        &self,
        stage: &BdmStage,
        metas: &[CropMeta],
        left: &Tensor<T>,
        right: &Tensor<T>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>, BdmTrace), ModelError> {
        if !self.config().attach_bdm {
            return Err(ModelError::BdmDetached);
        }
        let (pixels, trace) = self.forward_traced(left, right)?;
        let (points, bdm) = stage.forward(&pixels, metas)?;
        Ok((points, trace, bdm))
    }

    pub fn backward_3d(
        &mut self,
        stage: &BdmStage,
        trace: &ForwardTrace<T>,
        bdm: &BdmTrace,
        grad_3d: &Tensor<T>,
    ) -> Result<InputGrads<T>, ModelError> {
        let g = stage.backward(bdm, grad_3d)?;
        self.backward(trace, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pixels_to_triplet, project_point};
    use crate::model::{normalize_triplet, ModelConfig};

    fn scene() -> [Point3D; NUM_JOINTS] {
        [
            Point3D::new(-40.0, -60.0, 330.0),
            Point3D::new(-10.0, -85.0, 350.0),
            Point3D::new(10.0, -90.0, 355.0),
            Point3D::new(28.0, -80.0, 352.0),
            Point3D::new(42.0, -62.0, 345.0),
            Point3D::new(5.0, 5.0, 360.0),
        ]
    }

    #[test]
    fn ground_truth_triplets_reproduce_points() {
        let stage = BdmStage::strict(StereoRig::default());
        let meta = CropMeta {
            offset_l: 250.5,
            offset_r: 200.25,
            offset_y: 60.0,
            scale: 2.5,
            input_size: 96,
        };
        let mut norm = Vec::new();
        for p in scene() {
            let trip = pixels_to_triplet(&project_point(&stage.rig, &p).unwrap());
            norm.extend(normalize_triplet(&trip, &meta));
        }
        let t = Tensor::<f64>::from_vec(&[1, OUTPUT_DIM], norm).unwrap();
        let (out, trace) = stage.forward(&t, &[meta]).unwrap();
        assert_eq!(trace.clamped, 0);
        for (j, p) in scene().iter().enumerate() {
            for (a, b) in out.data()[3 * j..3 * j + 3].iter().zip(p.to_array()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn detached_model_refuses_3d_forward() {
        let cfg = ModelConfig {
            attach_bdm: false,
            channel_multiplier: 0.125,
            input_size: 16,
            ..ModelConfig::full()
        };
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let x = Tensor::zeros(&m.input_shape(1));
        let stage = BdmStage::new(StereoRig::default());
        assert!(matches!(
            forward_3d(&m, &stage, &[CropMeta::identity(16)], &x, &x),
            Err(ModelError::BdmDetached)
        ));
    }

    #[test]
    fn meta_count_must_match_batch() {
        let stage = BdmStage::new(StereoRig::default());
        let t = Tensor::<f32>::full(&[2, OUTPUT_DIM], 0.5);
        assert!(matches!(
            stage.forward(&t, &[CropMeta::identity(96)]),
            Err(ModelError::MetaCount { batch: 2, metas: 1 })
        ));
    }
}
