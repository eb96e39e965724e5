//! Crop bookkeeping between full-frame pixel triplets and network units.
//!
//! The network sees each view through its own square crop. Both crops share
//! one size and one vertical offset; the horizontal offsets differ so that the
//! disparity stays recoverable. Network targets are crop pixels divided by the
//! crop size, i.e. roughly in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::geometry::PixelTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    /// Left edge of the left-view crop in full-frame pixels.
    pub offset_l: f64,
    /// Left edge of the right-view crop in full-frame pixels.
    pub offset_r: f64,
    /// Top edge of both crops.
    pub offset_y: f64,
    /// Source crop size divided by the network input size.
    pub scale: f64,
    /// Network input size the crop is resampled to.
    pub input_size: usize,
}

impl CropMeta {
    /// Identity crop: no offset, one source pixel per input pixel.
    pub fn identity(input_size: usize) -> Self {
        Self {
            offset_l: 0.0,
            offset_r: 0.0,
            offset_y: 0.0,
            scale: 1.0,
            input_size,
        }
    }

    /// Side of the source crop window in full-frame pixels.
    pub fn crop_size(&self) -> f64 {
        self.scale * self.input_size as f64
    }
}

pub fn denormalize_triplet(norm: [f64; 3], meta: &CropMeta) -> PixelTriplet {
    let size = meta.crop_size();
    PixelTriplet {
        s: (meta.offset_l + meta.offset_r) / 2.0 + size * norm[0],
        q: (meta.offset_l - meta.offset_r) + size * norm[1],
        t: meta.offset_y + size * norm[2],
    }
}

pub fn normalize_triplet(trip: &PixelTriplet, meta: &CropMeta) -> [f64; 3] {
    let size = meta.crop_size();
    [
        (trip.s - (meta.offset_l + meta.offset_r) / 2.0) / size,
        (trip.q - (meta.offset_l - meta.offset_r)) / size,
        (trip.t - meta.offset_y) / size,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_crop_scales_by_input_size() {
        let meta = CropMeta::identity(96);
        let t = denormalize_triplet([0.5, 0.25, 0.125], &meta);
        assert_eq!(t, PixelTriplet::new(48.0, 24.0, 12.0));
    }

    #[test]
    fn equal_offsets_cancel_in_disparity() {
        let meta = CropMeta {
            offset_l: 210.0,
            offset_r: 210.0,
            offset_y: 80.0,
            scale: 2.5,
            input_size: 96,
        };
        assert_eq!(denormalize_triplet([0.3, 0.1, 0.2], &meta).q, 240.0 * 0.1);
    }

    proptest! {
        #[test]
        fn normalize_denormalize_round_trip(
            s in 0.0f64..640.0, q in 4.0f64..120.0, t in 0.0f64..480.0,
            ol in 0.0f64..400.0, or in 0.0f64..400.0, oy in 0.0f64..240.0,
            scale in prop::sample::select(vec![2.5, 200.0 / 96.0, 160.0 / 96.0]),
        ) {
            let meta = CropMeta { offset_l: ol, offset_r: or, offset_y: oy, scale, input_size: 96 };
            let trip = PixelTriplet::new(s, q, t);
            let back = denormalize_triplet(normalize_triplet(&trip, &meta), &meta);
            prop_assert!((back.s - s).abs() < 1e-9);
            prop_assert!((back.q - q).abs() < 1e-9);
            prop_assert!((back.t - t).abs() < 1e-9);
        }
    }
}
