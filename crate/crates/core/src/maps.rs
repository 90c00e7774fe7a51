//! Dense scalar planes: generic `Grid`, disparity/depth maps with validity
//! masks, and the disparity <-> depth conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lightfield::Calibration;
use crate::pfm;

/// Disparities below this magnitude map to points at infinity and are
/// marked invalid instead of producing unbounded depths.
pub const DISPARITY_DIV_EPS: f64 = 1e-6;

/// Dense f64 plane, row-major. Workhorse for flows, confidences and filter
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Grid { width, height, data: vec![v; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        (1.0 - fx) * (1.0 - fy) * self.at(x0, y0)
            + fx * (1.0 - fy) * self.at(x1, y0)
            + (1.0 - fx) * fy * self.at(x0, y1)
            + fx * fy * self.at(x1, y1)
    }

    pub fn transpose(&self) -> Grid {
        let mut out = Grid::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.at(x, y));
            }
        }
        out
    }
}

/// Per-pixel disparity in pixels per unit angular step, with validity mask.
/// Invalid samples carry NaN and are excluded from all statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-pixel depth in world units, with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

macro_rules! scalar_map_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn invalid(width: usize, height: usize) -> Self {
                $ty {
                    width,
                    height,
                    values: vec![f64::NAN; width * height],
                    valid: vec![false; width * height],
                }
            }

            pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
                if values.len() != width * height {
                    return Err(Error::Structure(format!(
                        "map data length {} does not match {}x{}",
                        values.len(),
                        width,
                        height
                    )));
                }
                let valid = values.iter().map(|v| v.is_finite()).collect();
                Ok($ty { width, height, values, valid })
            }

            #[inline]
            pub fn at(&self, x: usize, y: usize) -> Option<f64> {
                let i = y * self.width + x;
                if self.valid[i] {
                    Some(self.values[i])
                } else {
                    None
                }
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, v: f64) {
                let i = y * self.width + x;
                self.values[i] = v;
                self.valid[i] = true;
            }

            #[inline]
            pub fn set_invalid(&mut self, x: usize, y: usize) {
                let i = y * self.width + x;
                self.values[i] = f64::NAN;
                self.valid[i] = false;
            }

            pub fn valid_count(&self) -> usize {
                self.valid.iter().filter(|v| **v).count()
            }

            pub fn valid_fraction(&self) -> f64 {
                self.valid_count() as f64 / (self.width * self.height) as f64
            }

            pub fn transpose(&self) -> $ty {
                let mut out = $ty::invalid(self.height, self.width);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let i = y * self.width + x;
                        if self.valid[i] {
                            out.set(y, x, self.values[i]);
                        }
                    }
                }
                out
            }

            /// Serialize as single-channel PFM; invalid pixels become a
            /// canonical NaN so the byte stream is reproducible.
            pub fn to_pfm_bytes(&self) -> Vec<u8> {
                let samples: Vec<f32> = self
                    .values
                    .iter()
                    .zip(&self.valid)
                    .map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN })
                    .collect();
                pfm::encode(self.width, self.height, 1, &samples)
            }

            pub fn write_pfm(&self, path: &Path) -> Result<()> {
                std::fs::write(path, self.to_pfm_bytes())?;
                Ok(())
            }

            /// Read a single-channel PFM; non-finite samples become invalid
            /// pixels.
            pub fn read_pfm(path: &Path) -> Result<Self> {
                let bytes = std::fs::read(path)?;
                Self::from_pfm_bytes(&bytes)
            }

            pub fn from_pfm_bytes(bytes: &[u8]) -> Result<Self> {
                let (w, h, c, samples) = pfm::decode(bytes)?;
                if c != 1 {
                    return Err(Error::Format("expected single-channel PFM".into()));
                }
                let mut out = Self::invalid(w, h);
                for y in 0..h {
                    for x in 0..w {
                        let v = samples[y * w + x] as f64;
                        if v.is_finite() {
                            out.set(x, y, v);
                        }
                    }
                }
                Ok(out)
            }
        }
    };
}

scalar_map_impl!(DisparityMap);
scalar_map_impl!(DepthMap);

/// Depth from disparity: Z = -f * baseline / d. Disparities within
/// [`DISPARITY_DIV_EPS`] of zero are points at infinity and come out invalid.
pub fn disparity_to_depth(d: &DisparityMap, calib: &Calibration) -> DepthMap {
    let mut out = DepthMap::invalid(d.width, d.height);
    let num = -calib.focal_length_px * calib.baseline;
    for y in 0..d.height {
        for x in 0..d.width {
            if let Some(v) = d.at(x, y) {
                if v.abs() >= DISPARITY_DIV_EPS {
                    out.set(x, y, num / v);
                }
            }
        }
    }
    out
}

/// Inverse of [`disparity_to_depth`]; degenerate depths come out invalid.
pub fn depth_to_disparity(z: &DepthMap, calib: &Calibration) -> DisparityMap {
    let mut out = DisparityMap::invalid(z.width, z.height);
    let num = -calib.focal_length_px * calib.baseline;
    for y in 0..z.height {
        for x in 0..z.width {
            if let Some(v) = z.at(x, y) {
                if v.abs() > 0.0 {
                    out.set(x, y, num / v);
                }
            }
        }
    }
    out
}
