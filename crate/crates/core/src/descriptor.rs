//! Dense per-pixel gradient-orientation descriptors. One descriptor per
//! pixel over a fixed 16x16 support (4x4 cells of 4x4 px, 8 orientation
//! bins, D = 128), Gaussian-weighted, clamped and renormalized. Their
//! patchwise SAD is the matching cost used by the sparse matcher.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Window side in pixels; descriptors are translation-equivariant away from
/// a boundary band of half this width.
pub const SUPPORT: usize = 16;
pub const SUPPORT_RADIUS: usize = SUPPORT / 2;
const CELLS: usize = 4;
const CELL_SIZE: usize = 4;
const ORI_BINS: usize = 8;
/// Descriptor length: 4 * 4 cells x 8 orientation bins.
pub const DIM: usize = CELLS * CELLS * ORI_BINS;

#[derive(Debug, Clone, Copy)]
pub struct DescriptorParams {
    /// Gaussian weighting width over the support window.
    pub sigma: f64,
    /// Per-component clamp applied after the first normalization.
    pub clamp: f32,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        DescriptorParams { sigma: 8.0, clamp: 0.2 }
    }
}

/// W x H field of unit-norm (or zero) descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorField {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl DescriptorField {
    /// Wrap raw per-pixel descriptor data (row-major, `dim` floats each).
    pub fn from_raw(width: usize, height: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * dim);
        DescriptorField { width, height, dim, data }
    }

    #[inline]
    pub fn desc(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Central-difference gradients of the luminance image with replicate
/// padding, returned as (magnitude, orientation-bin coordinate in [0, 8)).
fn gradient_planes(gray: &Image) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (gray.width(), gray.height());
    let mut mag = vec![0.0f32; w * h];
    let mut bin = vec![0.0f32; w * h];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let gx = 0.5 * (gray.at(xp, y) - gray.at(xm, y));
            let gy = 0.5 * (gray.at(x, yp) - gray.at(x, ym));
            let m = (gx * gx + gy * gy).sqrt();
            mag[y * w + x] = m;
            if m > 0.0 {
                let theta = (gy as f64).atan2(gx as f64);
                let mut b = (theta + std::f64::consts::PI)
                    / (2.0 * std::f64::consts::PI)
                    * ORI_BINS as f64;
                if b >= ORI_BINS as f64 {
                    b -= ORI_BINS as f64;
                }
                bin[y * w + x] = b as f32;
            }
        }
    }
    (mag, bin)
}

fn normalize(desc: &mut [f32], clamp: f32) {
    let norm2: f64 = desc.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if norm2 <= 1e-24 {
        desc.fill(0.0);
        return;
    }
    let inv = 1.0 / norm2.sqrt() as f32;
    let mut clamped = false;
    for v in desc.iter_mut() {
        *v *= inv;
        if *v > clamp {
            *v = clamp;
            clamped = true;
        }
    }
    if clamped {
        let norm2: f64 = desc.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let inv = 1.0 / norm2.sqrt() as f32;
        for v in desc.iter_mut() {
            *v *= inv;
        }
    }
}

/// Compute the dense descriptor field of an image.
pub fn compute_descriptors(img: &Image, params: &DescriptorParams) -> Result<DescriptorField> {
    let (w, h) = (img.width(), img.height());
    if w < SUPPORT || h < SUPPORT {
        return Err(Error::Size(format!(
            "image {w}x{h} smaller than descriptor support {SUPPORT}x{SUPPORT}"
        )));
    }
    let gray = img.to_gray();
    let (mag, bin) = gradient_planes(&gray);

    // Gaussian weight per window offset; the window center sits between
    // samples at offset (-0.5, -0.5).
    let mut weight = [0.0f32; SUPPORT * SUPPORT];
    for wy in 0..SUPPORT {
        for wx in 0..SUPPORT {
            let dx = wx as f64 - (SUPPORT_RADIUS as f64 - 0.5);
            let dy = wy as f64 - (SUPPORT_RADIUS as f64 - 0.5);
            weight[wy * SUPPORT + wx] =
                (-(dx * dx + dy * dy) / (2.0 * params.sigma * params.sigma)).exp() as f32;
        }
    }

    let mut data = vec![0.0f32; w * h * DIM];
    data.par_chunks_mut(w * DIM)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let desc = &mut row[x * DIM..(x + 1) * DIM];
                for wy in 0..SUPPORT {
                    let sy = (y + wy).saturating_sub(SUPPORT_RADIUS).min(h - 1);
                    let cell_y = wy / CELL_SIZE;
                    for wx in 0..SUPPORT {
                        let sx = (x + wx).saturating_sub(SUPPORT_RADIUS).min(w - 1);
                        let m = mag[sy * w + sx];
                        if m == 0.0 {
                            continue;
                        }
                        let contrib = m * weight[wy * SUPPORT + wx];
                        let cell = cell_y * CELLS + wx / CELL_SIZE;
                        let b = bin[sy * w + sx];
                        let b0 = b.floor();
                        let f = b - b0;
                        let i0 = b0 as usize % ORI_BINS;
                        let i1 = (i0 + 1) % ORI_BINS;
                        desc[cell * ORI_BINS + i0] += contrib * (1.0 - f);
                        desc[cell * ORI_BINS + i1] += contrib * f;
                    }
                }
                normalize(desc, params.clamp);
            }
        });

    Ok(DescriptorField { width: w, height: h, dim: DIM, data })
}
