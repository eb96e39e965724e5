//! Dataset directory: `rig.json`, `manifest.jsonl` and `images/*.pgm`.
//!
//! Each view is stored as a square region of interest around the view's
//! joint centroid rather than the full frame. The region is large enough to
//! hold the biggest crop window, and its full-frame origin is recorded in the
//! manifest (`origin_left`, `origin_right`).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_multiscale, crop_windows, Sample, DEFAULT_SCALE, SCALE_CHOICES};
use super::pgm::{quantize, Gray8};
use super::render::{render_view, Image, RenderParams, View, Window};
use super::scene::{sample_scene, SceneParams};
use super::{derive_seed, stream_rng, DataError, Split};
use crate::geometry::{bdm_forward, pixels_to_triplet, project_point, DisparityGuard, Point3D, StereoPixelPair, StereoRig};
use crate::model::{CropMeta, NUM_JOINTS, OUTPUT_DIM};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RIG_FILE: &str = "rig.json";
pub const IMAGE_DIR: &str = "images";
/// Side of the stored region of interest.
pub const ROI_SIZE: usize = 256;
/// Largest allowed distance between stored and re-triangulated 3D labels (mm).
pub const LABEL_TOLERANCE_MM: f64 = 1e-6;

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub left: String,
    pub right: String,
    pub left_mask: String,
    pub right_mask: String,
    /// Millimetres, joint order thumb, index, middle, ring, pinky, palm root.
    pub joints_3d: [[f64; 3]; NUM_JOINTS],
    /// `u_l, v_l, u_r, v_r` per joint.
    pub joints_px: [[f64; 4]; NUM_JOINTS],
    pub scene_seed: u64,
    pub origin_left: [i64; 2],
    pub origin_right: [i64; 2],
}

impl ManifestRecord {
    pub fn pairs(&self) -> [StereoPixelPair; NUM_JOINTS] {
        self.joints_px.map(StereoPixelPair::from_array)
    }

    pub fn points(&self) -> [Point3D; NUM_JOINTS] {
        self.joints_3d.map(|[x, y, z]| Point3D::new(x, y, z))
    }

    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Record {
            id: self.id.clone(),
            msg: msg.into(),
        }
    }

    /// Stored 3D labels must equal the triangulated pixel labels.
    pub fn check_labels(&self, rig: &StereoRig) -> Result<(), DataError> {
        let finite = self.joints_3d.iter().flatten().chain(self.joints_px.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(self.err("non-finite label"));
        }
        for (j, (pair, p)) in self.pairs().iter().zip(self.points()).enumerate() {
            let tri = bdm_forward(rig, &pixels_to_triplet(pair), &DisparityGuard::strict())
                .map_err(|e| self.err(format!("joint {j}: {e}")))?;
            let d = tri.point.distance(&p);
            if !(d <= LABEL_TOLERANCE_MM) {
                return Err(self.err(format!("joint {j}: 3D label is {d:e} mm from its triangulated pixels")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub rig: StereoRig,
    pub scene: SceneParams,
    pub render: RenderParams,
    /// Worker threads for record generation. Output does not depend on it.
    pub threads: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            train: 4096,
            test: 512,
            seed: 0,
            rig: StereoRig::default(),
            scene: SceneParams::default(),
            render: RenderParams::default(),
            threads: 1,
        }
    }
}

fn roi_origin(centre: f64, extent: usize) -> i64 {
    (centre.round() as i64 - (ROI_SIZE / 2) as i64).clamp(0, (extent - ROI_SIZE) as i64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

fn generate_record(
    out_dir: &Path,
    opts: &GenerateOptions,
    split: Split,
    index: usize,
) -> Result<ManifestRecord, DataError> {
    let rig = &opts.rig;
    let scene_seed = derive_seed(opts.seed, split.name(), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let scene = sample_scene(rig, &opts.scene, &mut rng)?;
    let pairs = scene
        .joints
        .map(|p| project_point(rig, &p).expect("accepted scenes have positive depth"));
    let id = format!("{}-{index:06}", split.name());
    for size in SCALE_CHOICES {
        crop_windows(&pairs, size, rig.w, rig.h).map_err(|e| DataError::Record {
            id: id.clone(),
            msg: e.to_string(),
        })?;
    }
    let n = NUM_JOINTS as f64;
    let cv = pairs.iter().map(|p| p.v_l).sum::<f64>() / n;
    let oy = roi_origin(cv, rig.height_px());
    let mut record = ManifestRecord {
        id: id.clone(),
        split,
        left: format!("{IMAGE_DIR}/{id}_left.pgm"),
        right: format!("{IMAGE_DIR}/{id}_right.pgm"),
        left_mask: format!("{IMAGE_DIR}/{id}_left_mask.pgm"),
        right_mask: format!("{IMAGE_DIR}/{id}_right_mask.pgm"),
        joints_3d: scene.joints.map(Point3D::to_array),
        joints_px: pairs.map(StereoPixelPair::to_array),
        scene_seed,
        origin_left: [0, oy],
        origin_right: [0, oy],
    };
    for view in [View::Left, View::Right] {
        let cu = pairs
            .iter()
            .map(|p| if view == View::Left { p.u_l } else { p.u_r })
            .sum::<f64>()
            / n;
        let window = Window {
            x0: roi_origin(cu, rig.width_px()),
            y0: oy,
            width: ROI_SIZE,
            height: ROI_SIZE,
        };
        let r = render_view(rig, &scene, view, window, &opts.render, &mut rng);
        let (gray_path, mask_path) = match view {
            View::Left => {
                record.origin_left = [window.x0, window.y0];
                (&record.left, &record.left_mask)
            }
            View::Right => {
                record.origin_right = [window.x0, window.y0];
                (&record.right, &record.right_mask)
            }
        };
        Gray8::from_unit(ROI_SIZE, ROI_SIZE, &r.gray.data).write(&out_dir.join(gray_path))?;
        Gray8::from_unit(ROI_SIZE, ROI_SIZE, &r.mask.data).write(&out_dir.join(mask_path))?;
    }
    record.check_labels(rig)?;
    Ok(record)
}

/// Writes `opts.train` training and `opts.test` test records under `out_dir`.
/// The output is a pure function of the options.
pub fn generate_dataset(out_dir: &Path, opts: &GenerateOptions) -> Result<Vec<ManifestRecord>, DataError> {
    opts.rig.validate().map_err(|e| DataError::Invalid(e.to_string()))?;
    if opts.rig.width_px() < ROI_SIZE || opts.rig.height_px() < ROI_SIZE {
        return Err(DataError::Invalid(format!("frames must be at least {ROI_SIZE} pixels on each side")));
    }
    let images = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let jobs: Vec<(Split, usize)> = [(Split::Train, opts.train), (Split::Test, opts.test)]
        .into_iter()
        .flat_map(|(split, count)| (0..count).map(move |i| (split, i)))
        .collect();
    // Every record seeds its own generator and writes its own files, so the
    // chunks are independent; results are joined back in manifest order.
    let chunk = jobs.len().div_ceil(opts.threads.max(1)).max(1);
    let records = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&(split, i)| generate_record(out_dir, opts, split, i))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?
    .concat();
    let train_seeds: HashSet<u64> = records.iter().filter(|r| r.split == Split::Train).map(|r| r.scene_seed).collect();
    if let Some(r) = records.iter().find(|r| r.split == Split::Test && train_seeds.contains(&r.scene_seed)) {
        return Err(r.err("test scene seed collides with a training scene"));
    }

    let rig_json = serde_json::to_string_pretty(&opts.rig).expect("rig serializes");
    write_atomic(&out_dir.join(RIG_FILE), format!("{rig_json}\n").as_bytes())?;
    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r).expect("record serializes"));
        manifest.push('\n');
    }
    write_atomic(&out_dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(records)
}

pub fn read_rig(dir: &Path) -> Result<StereoRig, DataError> {
    let path = dir.join(RIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let rig: StereoRig = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    rig.validate().map_err(|e| DataError::Format {
        path,
        msg: e.to_string(),
    })?;
    Ok(rig)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Format {
                path: path.clone(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub input_size: usize,
    pub use_mask: bool,
    /// Only records of this split; all records when `None`.
    pub split: Option<Split>,
    /// Load at most this many records (in manifest order).
    pub limit: Option<usize>,
}

impl LoadOptions {
    pub fn new(input_size: usize, use_mask: bool, split: Option<Split>) -> Self {
        Self {
            input_size,
            use_mask,
            split,
            limit: None,
        }
    }
}

/// Resampled crops of one record at one scale, quantized to 8 bits.
#[derive(Debug, Clone)]
struct CachedCrop {
    scale: usize,
    left: Vec<u8>,
    right: Vec<u8>,
    meta: CropMeta,
    label_norm: [f64; OUTPUT_DIM],
}

#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub manifest: ManifestRecord,
    crops: Vec<CachedCrop>,
}

/// An in-memory dataset with every record pre-cropped at all three scales.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rig: StereoRig,
    pub input_size: usize,
    pub use_mask: bool,
    records: Vec<LoadedRecord>,
}

fn load_image(dir: &Path, rel: &str, origin: [i64; 2], record: &ManifestRecord) -> Result<Image, DataError> {
    let g = Gray8::read(&dir.join(rel))?;
    if g.width != ROI_SIZE || g.height != ROI_SIZE {
        return Err(record.err(format!("{rel} is {}x{}, expected {ROI_SIZE}x{ROI_SIZE}", g.width, g.height)));
    }
    Ok(Image {
        window: Window {
            x0: origin[0],
            y0: origin[1],
            width: g.width,
            height: g.height,
        },
        data: g.to_unit(),
    })
}

fn load_record(dir: &Path, rig: &StereoRig, m: ManifestRecord, opts: &LoadOptions) -> Result<LoadedRecord, DataError> {
    m.check_labels(rig)?;
    let left = [
        load_image(dir, &m.left, m.origin_left, &m)?,
        load_image(dir, &m.left_mask, m.origin_left, &m)?,
    ];
    let right = [
        load_image(dir, &m.right, m.origin_right, &m)?,
        load_image(dir, &m.right_mask, m.origin_right, &m)?,
    ];
    let pairs = m.pairs();
    let points = m.points();
    let mut crops = Vec::with_capacity(SCALE_CHOICES.len());
    for scale in SCALE_CHOICES {
        let win = crop_windows(&pairs, scale, rig.w, rig.h).map_err(|e| m.err(e.to_string()))?;
        let inside = |o: f64, origin: i64| o >= origin as f64 && o + win.size <= (origin + ROI_SIZE as i64) as f64;
        if !(inside(win.offset_l, m.origin_left[0])
            && inside(win.offset_r, m.origin_right[0])
            && inside(win.offset_y, m.origin_left[1])
            && inside(win.offset_y, m.origin_right[1]))
        {
            return Err(m.err(format!("{scale}-pixel crop window leaves the stored image region")));
        }
        let s = crop_multiscale(
            [&left[0], &left[1]],
            [&right[0], &right[1]],
            &pairs,
            &points,
            (rig.w, rig.h),
            scale,
            opts.input_size,
            opts.use_mask,
            &m.id,
        )
        .map_err(|e| m.err(e.to_string()))?;
        let q = |t: &Tensor<f32>| t.data().iter().map(|&v| quantize(v)).collect();
        crops.push(CachedCrop {
            scale,
            left: q(&s.left),
            right: q(&s.right),
            meta: s.meta,
            label_norm: s.label_norm,
        });
    }
    Ok(LoadedRecord { manifest: m, crops })
}

/// Reads, validates and pre-crops a dataset directory.
pub fn load_dataset(dir: &Path, opts: &LoadOptions) -> Result<Dataset, DataError> {
    if opts.input_size == 0 {
        return Err(DataError::Invalid("input size must be positive".into()));
    }
    let rig = read_rig(dir)?;
    let mut manifest = read_manifest(dir)?;
    if let Some(split) = opts.split {
        manifest.retain(|r| r.split == split);
    }
    if let Some(limit) = opts.limit {
        manifest.truncate(limit);
    }
    let records = manifest
        .into_iter()
        .map(|m| load_record(dir, &rig, m, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        rig,
        input_size: opts.input_size,
        use_mask: opts.use_mask,
        records,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &ManifestRecord {
        &self.records[index].manifest
    }

    pub fn records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().map(|r| &r.manifest)
    }

    pub fn channels(&self) -> usize {
        if self.use_mask {
            2
        } else {
            1
        }
    }

    pub fn sample(&self, index: usize, scale: usize) -> Result<Sample, DataError> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| DataError::Invalid(format!("record index {index} out of range")))?;
        let crop = rec
            .crops
            .iter()
            .find(|c| c.scale == scale)
            .ok_or_else(|| DataError::Invalid(format!("scale choice {scale} not in {SCALE_CHOICES:?}")))?;
        let n = self.input_size;
        let shape = [self.channels(), n, n];
        let unit = |b: &[u8]| Tensor::from_vec(&shape, b.iter().map(|&v| v as f32 / 255.0).collect()).expect("cached size");
        let m = &rec.manifest;
        Ok(Sample {
            left: unit(&crop.left),
            right: unit(&crop.right),
            label_px: m.pairs().map(|p| pixels_to_triplet(&p)),
            label_3d: m.points(),
            label_norm: crop.label_norm,
            meta: crop.meta,
            scene_id: m.id.clone(),
            scale_choice: scale,
        })
    }

    /// Scale choice per record for one epoch: uniform over the three sizes
    /// when `multi_scale`, otherwise always the largest.
    pub fn epoch_scales(&self, epoch: u64, seed: u64, multi_scale: bool) -> Vec<usize> {
        if !multi_scale {
            return vec![DEFAULT_SCALE; self.len()];
        }
        let mut rng = stream_rng(seed, "scales", epoch);
        (0..self.len())
            .map(|_| *SCALE_CHOICES.choose(&mut rng).expect("non-empty"))
            .collect()
    }

    /// All samples of one epoch, in record order.
    pub fn epoch(&self, epoch: u64, seed: u64, multi_scale: bool) -> impl Iterator<Item = Result<Sample, DataError>> + '_ {
        self.epoch_scales(epoch, seed, multi_scale)
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.sample(i, s))
    }

    /// Keeps only the first `n` records.
    pub fn truncate(&mut self, n: usize) {
        self.records.truncate(n);
    }
}

/// Samples stacked into network tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `[B, 18]` crop-normalized targets.
    pub label_norm: Tensor<f32>,
    /// `[B, 18]` metric targets (mm).
    pub label_3d: Tensor<f32>,
    pub metas: Vec<CropMeta>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self, DataError> {
        let first = samples.first().ok_or_else(|| DataError::Invalid("empty batch".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.left.shape());
        let stack = |f: &dyn Fn(&Sample) -> &[f32]| -> Result<Tensor<f32>, DataError> {
            let data: Vec<f32> = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
            Tensor::from_vec(&shape, data).map_err(|e| DataError::Invalid(e.to_string()))
        };
        let labels = |f: &dyn Fn(&Sample) -> Vec<f32>| {
            Tensor::from_vec(&[samples.len(), OUTPUT_DIM], samples.iter().flat_map(f).collect())
                .expect("fixed label width")
        };
        Ok(Self {
            left: stack(&|s| s.left.data())?,
            right: stack(&|s| s.right.data())?,
            label_norm: labels(&|s| s.label_norm.iter().map(|&v| v as f32).collect()),
            label_3d: labels(&|s| s.label_3d.iter().flat_map(|p| p.to_array()).map(|v| v as f32).collect()),
            metas: samples.iter().map(|s| s.meta).collect(),
        })
    }
}
