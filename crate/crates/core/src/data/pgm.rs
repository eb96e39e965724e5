//! Binary 8-bit PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    /// Quantizes `[0, 1]` intensities (clamped) to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height, "pixel count");
        Self {
            width,
            height,
            pixels: values.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?);
        }
        if fields[0] != "P5" {
            return Err(format!("expected magic P5, got {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number {s:?}"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(format!("expected maxval 255, got {maxval}"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(format!("expected {} raster bytes, found {}", width * height, raster.len()));
        }
        Ok(Self {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.encode()).map_err(|e| DataError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| DataError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
