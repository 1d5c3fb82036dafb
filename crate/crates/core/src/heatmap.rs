//! Landmark ↔ heat-map conversion.
//!
//! Targets form a per-pixel 4-class simplex: one Gaussian bump per present
//! landmark, background as the complement. Decoding thresholds the peak of
//! each landmark channel and takes the probability-weighted centroid of the
//! channel's half-maximum superlevel set.

use crate::error::{Error, Result};
use crate::landmarks::{Frame, LandmarkSet, Point, View};
use crate::preprocess::PreprocRecord;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_PX: f64 = 5.0;
pub const DEFAULT_TAU: f64 = 0.5;
/// Fraction of a channel's peak defining the centroid region.
pub const CENTROID_LEVEL: f64 = 0.5;
pub const CHANNELS: usize = 4;

/// `[4, H, W]` per-pixel class probabilities; channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub probs: Tensor<f32>,
    pub sigma_px: f64,
}

impl HeatmapStack {
    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Wrap network probabilities of one sample (`[4,H,W]` or `[1,4,H,W]`).
    pub fn from_probs(probs: Tensor<f32>) -> Result<Self> {
        let probs = match probs.shape() {
            &[1, c, h, w] => probs.reshape(&[c, h, w])?,
            &[_, _, _] => probs,
            s => return Err(Error::Config(format!("heat-map stack must be [4,H,W], got {s:?}"))),
        };
        if probs.shape()[0] != CHANNELS {
            return Err(Error::Config(format!("heat-map stack needs {CHANNELS} channels, got {}", probs.shape()[0])));
        }
        Ok(Self { probs, sigma_px: f64::NAN })
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.probs.data()[k * hw..(k + 1) * hw]
    }
}

/// Gaussian target for `landmarks` on an `height × width` grid.
pub fn encode(landmarks: &LandmarkSet, height: usize, width: usize, sigma_px: f64) -> Result<HeatmapStack> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::Config(format!("heat-map sigma must be positive, got {sigma_px}")));
    }
    let grid = Frame::new(height, width, landmarks.frame.spacing_mm);
    for p in landmarks.points.iter().flatten() {
        if !grid.contains(*p) {
            return Err(Error::Usage(format!(
                "landmark ({:.2}, {:.2}) outside the {height}×{width} grid",
                p.row, p.col
            )));
        }
    }
    let hw = height * width;
    let mut data = vec![0.0f32; CHANNELS * hw];
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for r in 0..height {
        for c in 0..width {
            let mut raw = [0.0f64; CHANNELS];
            for (k, p) in landmarks.points.iter().enumerate() {
                if let Some(p) = p {
                    let d2 = (r as f64 - p.row).powi(2) + (c as f64 - p.col).powi(2);
                    raw[k + 1] = (-d2 * inv).exp();
                }
            }
            let fg: f64 = raw[1..].iter().sum();
            raw[0] = (1.0 - fg).max(0.0);
            let total = raw[0] + fg;
            for (k, v) in raw.iter().enumerate() {
                data[k * hw + r * width + c] = (v / total) as f32;
            }
        }
    }
    Ok(HeatmapStack { probs: Tensor::new(&[CHANNELS, height, width], data)?, sigma_px })
}

/// Read landmarks back from a probability stack. A slot is present when its
/// channel peak reaches `tau`. With several separated maxima the centroid
/// averages over all of them (one global threshold per channel).
pub fn decode(stack: &HeatmapStack, view: View, tau: f64, frame: Frame) -> Result<LandmarkSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("presence threshold must lie in (0,1), got {tau}")));
    }
    let (h, w) = (stack.height(), stack.width());
    let mut points = [None; 3];
    for (k, slot) in points.iter_mut().enumerate() {
        let ch = stack.channel(k + 1);
        let peak = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        if !(peak >= tau) {
            continue;
        }
        let level = CENTROID_LEVEL * peak;
        let (mut sw, mut sr, mut sc) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..h {
            for c in 0..w {
                let v = ch[r * w + c] as f64;
                if v >= level {
                    sw += v;
                    sr += v * r as f64;
                    sc += v * c as f64;
                }
            }
        }
        *slot = Some(Point::new(sr / sw, sc / sw));
    }
    Ok(LandmarkSet { view, frame, points })
}

/// Map network-frame landmarks back to the original image grid.
pub fn to_original_frame(landmarks: &LandmarkSet, record: &PreprocRecord) -> Result<LandmarkSet> {
    let f = landmarks.frame;
    if (f.height, f.width) != record.output_size {
        return Err(Error::Usage(format!(
            "landmarks live on a {}×{} frame but the transform produced {}×{}",
            f.height, f.width, record.output_size.0, record.output_size.1
        )));
    }
    let points = landmarks.points.map(|p| {
        p.map(|p| {
            let (row, col) = record.inverse(p.row, p.col);
            Point::new(row, col)
        })
    });
    Ok(LandmarkSet {
        view: landmarks.view,
        frame: Frame::new(record.source_size.0, record.source_size.1, record.source_spacing_mm),
        points,
    })
}
