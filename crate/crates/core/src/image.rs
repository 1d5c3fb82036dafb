//! 2-D scalar images and the filtering primitives shared by preprocessing
//! and the phantom generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_EXTENT: usize = 16;

/// Row-major scalar image with physical pixel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    /// (row, col) spacing in millimetres.
    spacing_mm: (f64, f64),
}

/// Extents and spacing without the pixels; the JSON sidecar of a raw image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: (f64, f64),
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, spacing_mm: (f64, f64)) -> Result<Self> {
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(Error::Config(format!("image extents {height}×{width} below the {MIN_EXTENT}-pixel minimum")));
        }
        if pixels.len() != height * width {
            return Err(Error::Config(format!(
                "{height}×{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0) || !spacing_mm.0.is_finite() || !spacing_mm.1.is_finite() {
            return Err(Error::Config(format!("pixel spacing must be positive, got {spacing_mm:?}")));
        }
        Ok(Self { height, width, pixels, spacing_mm })
    }

    /// Skips the minimum-extent check; for intermediate results only.
    pub(crate) fn new_unchecked(height: usize, width: usize, pixels: Vec<f32>, spacing_mm: (f64, f64)) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Self { height, width, pixels, spacing_mm }
    }

    pub fn filled(height: usize, width: usize, value: f32, spacing_mm: (f64, f64)) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], spacing_mm)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }

    pub fn geometry(&self) -> ImageGeometry {
        ImageGeometry { height: self.height, width: self.width, spacing_mm: self.spacing_mm }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Same geometry, new pixels.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self { pixels, ..self.clone() }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Bilinear sample at fractional (row, col); coordinates are clamped to
    /// the pixel-centre hull, so edges replicate.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let c = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = (r.floor() as usize).min(self.height - 1);
        let c0 = (c.floor() as usize).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let v = |rr: usize, cc: usize| self.get(rr, cc) as f64;
        let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
        let bottom = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    }
}

/// Sampled, normalized Gaussian truncated at 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// How samples outside the image are treated by [`convolve_separable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Replicate the nearest edge pixel.
    Clamp,
    /// Treat outside samples as zero.
    Zero,
}

/// Separable convolution of a row-major `h×w` buffer with the same 1-D
/// kernel along both axes. Accumulates in f64.
pub fn convolve_separable(data: &[f64], h: usize, w: usize, kernel: &[f64], border: Border) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], n_lines: usize, len: usize, stride_line: usize, stride_px: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..n_lines {
            for i in 0..len {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + k as isize - r;
                    let j = if j < 0 || j >= len as isize {
                        match border {
                            Border::Zero => continue,
                            Border::Clamp => j.clamp(0, len as isize - 1),
                        }
                    } else {
                        j
                    };
                    acc += kv * src[line * stride_line + j as usize * stride_px];
                }
                out[line * stride_line + i * stride_px] = acc;
            }
        }
        out
    };
    let rows = pass(data, h, w, w, 1);
    pass(&rows, w, h, 1, w)
}

/// Gaussian blur with edge replication.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let data: Vec<f64> = image.pixels().iter().map(|&v| v as f64).collect();
    let out = convolve_separable(&data, image.height(), image.width(), &gaussian_kernel(sigma), Border::Clamp);
    image.with_pixels(out.into_iter().map(|v| v as f32).collect())
}
