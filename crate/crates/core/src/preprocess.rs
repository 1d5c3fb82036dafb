//! Spacing normalization, square framing, surface-coil shading correction,
//! intensity normalization and training-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{convolve_separable, gaussian_blur, gaussian_kernel, Border, Image};

/// Side of the square network input at 1 mm spacing.
pub const FRAME_SIZE: usize = 400;
/// Width of the Gaussian low-pass used as the coil-sensitivity estimate.
pub const BIAS_SIGMA_PX: f64 = 60.0;
/// Lower clamp of the sensitivity estimate, relative to its mean.
pub const BIAS_FLOOR: f64 = 0.05;
/// Pixels at or above this fraction of the image mean count as tissue when
/// estimating the sensitivity field.
pub const BIAS_MASK_FRACTION: f64 = 0.2;

/// Geometry of one preprocessing run; maps original pixel coordinates to
/// network-frame coordinates and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocRecord {
    /// Resampling factor per axis (= source spacing in mm).
    pub scale: (f64, f64),
    /// Signed (row, col) shift applied by pad/crop.
    pub offset: (i64, i64),
    pub source_size: (usize, usize),
    pub source_spacing_mm: (f64, f64),
    pub output_size: (usize, usize),
    /// False when the image had no intensity variance to normalize.
    pub normalized: bool,
}

impl PreprocRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            scale: (1.0, 1.0),
            offset: (0, 0),
            source_size: (height, width),
            source_spacing_mm: (1.0, 1.0),
            output_size: (height, width),
            normalized: false,
        }
    }

    /// Original (row, col) → network frame.
    pub fn forward(&self, row: f64, col: f64) -> (f64, f64) {
        (row * self.scale.0 + self.offset.0 as f64, col * self.scale.1 + self.offset.1 as f64)
    }

    /// Network frame (row, col) → original.
    pub fn inverse(&self, row: f64, col: f64) -> (f64, f64) {
        ((row - self.offset.0 as f64) / self.scale.0, (col - self.offset.1 as f64) / self.scale.1)
    }
}

/// Bilinear resampling to 1 mm × 1 mm. Returns the per-axis scale factor.
pub fn resample_to_1mm(image: &Image) -> (Image, (f64, f64)) {
    let scale = image.spacing_mm();
    if scale == (1.0, 1.0) {
        return (image.clone(), scale);
    }
    let out_h = ((image.height() as f64 * scale.0).round() as usize).max(1);
    let out_w = ((image.width() as f64 * scale.1).round() as usize).max(1);
    let mut px = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = r as f64 / scale.0;
        for c in 0..out_w {
            px.push(image.sample_bilinear(sr, c as f64 / scale.1) as f32);
        }
    }
    // sub-millimetre sources can shrink below the usual minimum extent
    (Image::new_unchecked(out_h, out_w, px, (1.0, 1.0)), scale)
}

/// Centre pad (zeros) or crop to `size×size`. The odd remainder goes to the
/// high-index side. Returns the (row, col) offset mapping input → output.
pub fn pad_crop(image: &Image, size: usize) -> (Image, (i64, i64)) {
    let off = |n: usize| (size as i64 - n as i64) / 2;
    let (or, oc) = (off(image.height()), off(image.width()));
    let mut px = vec![0.0f32; size * size];
    for r in 0..size {
        let sr = r as i64 - or;
        if sr < 0 || sr >= image.height() as i64 {
            continue;
        }
        for c in 0..size {
            let sc = c as i64 - oc;
            if sc < 0 || sc >= image.width() as i64 {
                continue;
            }
            px[r * size + c] = image.get(sr as usize, sc as usize);
        }
    }
    (Image::new_unchecked(size, size, px, image.spacing_mm()), (or, oc))
}

pub fn pad_crop_400(image: &Image) -> (Image, (i64, i64)) {
    pad_crop(image, FRAME_SIZE)
}

/// Divide out a slowly varying sensitivity field and restore the mean.
///
/// The field is a Gaussian low-pass (σ = [`BIAS_SIGMA_PX`]) of the tissue
/// pixels, normalized by the low-passed tissue mask so the estimate does not
/// sag at tissue or image borders.
pub fn bias_correct(image: &Image) -> Image {
    let mean = image.mean();
    if mean <= 0.0 || image.pixels().iter().all(|&v| v == 0.0) {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let threshold = BIAS_MASK_FRACTION * mean;
    let mask: Vec<f64> = image.pixels().iter().map(|&v| if v as f64 >= threshold { 1.0 } else { 0.0 }).collect();
    let masked: Vec<f64> = image.pixels().iter().zip(&mask).map(|(&v, &m)| v as f64 * m).collect();
    let kernel = gaussian_kernel(BIAS_SIGMA_PX);
    let num = convolve_separable(&masked, h, w, &kernel, Border::Zero);
    let den = convolve_separable(&mask, h, w, &kernel, Border::Zero);
    let mut field: Vec<f64> = num.iter().zip(&den).map(|(&n, &d)| if d > 1e-9 { n / d } else { 0.0 }).collect();
    let field_mean = field.iter().sum::<f64>() / field.len() as f64;
    let floor = BIAS_FLOOR * field_mean;
    field.iter_mut().for_each(|f| *f = f.max(floor));
    let corrected: Vec<f64> = image.pixels().iter().zip(&field).map(|(&v, &f)| v as f64 / f).collect();
    let cmean = corrected.iter().sum::<f64>() / corrected.len() as f64;
    let k = if cmean > 0.0 { mean / cmean } else { 1.0 };
    image.with_pixels(corrected.into_iter().map(|v| (v * k) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of feeding the shading-corrected image instead of the original.
    pub p_corrected: f64,
    pub p_noise: f64,
    /// Noise σ as a fraction of the image mean, drawn uniformly from this range.
    pub noise_sigma_range: (f64, f64),
    pub p_blur: f64,
    /// Blur σ (pixels), one drawn uniformly per application.
    pub blur_sigmas: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_corrected: 0.5, p_noise: 0.5, noise_sigma_range: (0.10, 0.30), p_blur: 0.5, blur_sigmas: vec![0.5, 1.0, 2.0] }
    }
}

impl AugmentConfig {
    /// Every augmentation disabled.
    pub fn none() -> Self {
        Self { p_corrected: 0.0, p_noise: 0.0, p_blur: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_corrected", self.p_corrected), ("p_noise", self.p_noise), ("p_blur", self.p_blur)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        let (lo, hi) = self.noise_sigma_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("noise sigma range ({lo}, {hi}) is not ordered")));
        }
        if self.p_blur > 0.0 && (self.blur_sigmas.is_empty() || self.blur_sigmas.iter().any(|&s| s <= 0.0)) {
            return Err(Error::Config("blur needs at least one positive sigma".into()));
        }
        Ok(())
    }
}

/// Apply the augmentation chain: pick original vs corrected, maybe add
/// noise, maybe blur. `corrected` may be passed in when already computed.
pub fn augment_with<R: Rng>(image: &Image, corrected: Option<&Image>, config: &AugmentConfig, rng: &mut R) -> Image {
    let use_corrected = rng.random_bool(config.p_corrected);
    let mut out = match (use_corrected, corrected) {
        (false, _) => image.clone(),
        (true, Some(c)) => c.clone(),
        (true, None) => bias_correct(image),
    };
    if rng.random_bool(config.p_noise) {
        let (lo, hi) = config.noise_sigma_range;
        let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let sigma = frac * out.mean().abs();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite noise sigma");
            for v in out.pixels_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    if rng.random_bool(config.p_blur) {
        let sigma = config.blur_sigmas[rng.random_range(0..config.blur_sigmas.len())];
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// [`augment_with`] driven by a fresh generator seeded with `seed`.
pub fn augment(image: &Image, config: &AugmentConfig, seed: u64) -> Image {
    augment_with(image, None, config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Zero mean, unit variance over the nonzero pixels; zeros (padding) stay
/// zero. Returns false, leaving the image untouched, when there is no variance.
pub fn normalize_intensity(image: &mut Image) -> bool {
    let support: Vec<f64> = image.pixels().iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if support.len() < 2 {
        return false;
    }
    let n = support.len() as f64;
    let mean = support.iter().sum::<f64>() / n;
    let var = support.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 * mean.abs().max(1.0).powi(2) {
        return false;
    }
    let inv = 1.0 / var.sqrt();
    for v in image.pixels_mut() {
        if *v != 0.0 {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
    true
}

/// Resample to 1 mm, frame to `frame_size`², normalize intensity.
pub fn preprocess_to(image: &Image, frame_size: usize) -> (Image, PreprocRecord) {
    let (resampled, scale) = resample_to_1mm(image);
    let (mut framed, offset) = pad_crop(&resampled, frame_size);
    let normalized = normalize_intensity(&mut framed);
    let record = PreprocRecord {
        scale,
        offset,
        source_size: (image.height(), image.width()),
        source_spacing_mm: image.spacing_mm(),
        output_size: (frame_size, frame_size),
        normalized,
    };
    (framed, record)
}

/// The full-size pipeline: 1 mm spacing, 400 × 400 frame.
pub fn preprocess_pipeline(image: &Image) -> (Image, PreprocRecord) {
    preprocess_to(image, FRAME_SIZE)
}
