//! Row-major floating-point raster with 1 (scalar) or 3 (RGB) channels.
//!
//! Color views hold samples in [0, 1]; scalar maps are unrestricted apart
//! from finiteness, which every constructor validates.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Structure(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Structure(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("image contains non-finite samples".into()));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, v: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(v);
    }

    /// Single-channel accessor; panics on multi-channel images.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x] = v;
    }

    /// Luminance conversion with the standard sRGB weights.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    /// Swap x and y; used to run horizontal-only machinery on vertical
    /// angular axes.
    pub fn transpose(&self) -> Image {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * self.channels;
                let dst = (x * self.height + y) * self.channels;
                data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        Image { width: self.height, height: self.width, channels: self.channels, data }
    }

    /// Bilinear sample of one channel at a fractional position, clamped to
    /// the image rectangle.
    pub fn sample_bilinear(&self, x: f64, y: f64, channel: usize) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let f = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * self.channels + channel] as f64;
        (1.0 - fx) * (1.0 - fy) * f(x0, y0)
            + fx * (1.0 - fy) * f(x1, y0)
            + (1.0 - fx) * fy * f(x0, y1)
            + fx * fy * f(x1, y1)
    }

    /// L1 color distance between two pixels of (possibly different) images.
    #[inline]
    pub fn l1_color_diff(a: &Image, ax: usize, ay: usize, b: &Image, bx: f64, by: f64) -> f64 {
        let pa = a.pixel(ax, ay);
        let mut d = 0.0;
        for (c, &v) in pa.iter().enumerate() {
            d += (v as f64 - b.sample_bilinear(bx, by, c)).abs();
        }
        d
    }

    /// Separable Gaussian blur with replicate boundary handling.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let w = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            sum += w;
        }
        for w in &mut kernel {
            *w /= sum;
        }

        let w = self.width as i64;
        let h = self.height as i64;
        let c = self.channels;
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let sx = (x + ki as i64 - radius).clamp(0, w - 1);
                        acc += kw * self.data[((y * w + sx) as usize) * c + ch] as f64;
                    }
                    tmp[((y * w + x) as usize) * c + ch] = acc as f32;
                }
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let sy = (y + ki as i64 - radius).clamp(0, h - 1);
                        acc += kw * tmp[((sy * w + x) as usize) * c + ch] as f64;
                    }
                    out[((y * w + x) as usize) * c + ch] = acc as f32;
                }
            }
        }
        Image { width: self.width, height: self.height, channels: c, data: out }
    }

    /// Decode a PNG into [0, 1] float samples (gray or RGB; alpha dropped).
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Image::new(w, h, 3, rgb.into_raw())
    }
}

/// Shared immutable view handle.
pub type ImageRef = Arc<Image>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_shape_and_finiteness() {
        assert!(Image::new(2, 2, 1, vec![0.0; 4]).is_ok());
        assert!(matches!(Image::new(2, 2, 1, vec![0.0; 5]), Err(Error::Structure(_))));
        assert!(matches!(Image::new(2, 2, 2, vec![0.0; 8]), Err(Error::Structure(_))));
        assert!(matches!(
            Image::new(2, 2, 1, vec![0.0, f32::NAN, 0.0, 0.0]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let img = Image::new(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = img.transpose();
        assert_eq!(t.width(), 2);
        assert_eq!(t.height(), 3);
        assert_eq!(t.at(0, 2), 3.0);
        assert_eq!(t.transpose(), img);
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((img.sample_bilinear(0.5, 0.5, 0) - 1.5).abs() < 1e-12);
        assert!((img.sample_bilinear(0.0, 0.0, 0) - 0.0).abs() < 1e-12);
        // Clamped outside the rectangle.
        assert!((img.sample_bilinear(-5.0, 0.0, 0) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn gray_of_gray_is_identity() {
        let img = Image::new(2, 1, 1, vec![0.25, 0.75]).unwrap();
        assert_eq!(img.to_gray(), img);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::new(8, 8, 1, vec![0.5; 64]).unwrap();
        let b = img.gaussian_blur(1.2);
        for &v in b.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }
}
