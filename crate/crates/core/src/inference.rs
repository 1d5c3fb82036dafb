//! Single-image inference: preprocess, forward, decode, map back.

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::heatmap::{decode, to_original_frame, HeatmapStack, DEFAULT_TAU};
use crate::image::Image;
use crate::landmarks::{Frame, LandmarkSet, View};
use crate::measure::lv_length;
use crate::preprocess::{preprocess_to, PreprocRecord};
use crate::service::{PhaseLength, SeriesTracker};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Landmarks in original pixel coordinates.
    pub landmarks: LandmarkSet,
    /// The same landmarks on the network frame.
    pub network: LandmarkSet,
    pub record: PreprocRecord,
    /// LAX only, when all three slots were found.
    pub lv_length_mm: Option<f64>,
}

/// One entry of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Image path as listed in the dataset manifest.
    pub image: String,
    pub landmarks: LandmarkSet,
    pub lv_length_mm: Option<f64>,
    pub elapsed_ms: f64,
}

/// ED/ES summary over a series of LAX frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub ed: PhaseLength,
    pub es: PhaseLength,
    pub shortening_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub predictions: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<SeriesSummary>,
}

impl PredictionsFile {
    /// ED = longest, ES = shortest measured LV, in file order.
    pub fn summarize_series(&mut self) -> Option<SeriesSummary> {
        let mut tracker = SeriesTracker::default();
        for (i, p) in self.predictions.iter().enumerate() {
            if let Some(len) = p.lv_length_mm {
                tracker.observe(i as u64, len);
            }
        }
        self.series = match (tracker.ed, tracker.es, tracker.shortening()) {
            (Some(ed), Some(es), Some(shortening_pct)) => Some(SeriesSummary { ed, es, shortening_pct }),
            _ => None,
        };
        self.series
    }
}

/// A loaded model with its decoding threshold. Shared read-only between
/// threads.
#[derive(Debug, Clone)]
pub struct Predictor {
    checkpoint: ModelCheckpoint,
    tau: f64,
}

impl Predictor {
    pub fn new(checkpoint: ModelCheckpoint) -> Self {
        Self { checkpoint, tau: DEFAULT_TAU }
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("presence threshold must lie in (0,1), got {tau}")));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.checkpoint
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn frame_size(&self) -> usize {
        self.checkpoint.provenance.frame_size
    }

    /// Heat-map probabilities `[4, F, F]` for an already preprocessed frame.
    pub fn heatmaps(&self, framed: &Image) -> Result<HeatmapStack> {
        let f = self.frame_size();
        if (framed.height(), framed.width()) != (f, f) {
            return Err(Error::Usage(format!(
                "network input must be {f}×{f}, got {}×{}",
                framed.height(),
                framed.width()
            )));
        }
        let input = Tensor::new(&[1, 1, f, f], framed.pixels().to_vec())?;
        let scores = self.checkpoint.model.infer(&input)?;
        HeatmapStack::from_probs(softmax(&scores)?)
    }

    pub fn predict(&self, image: &Image, view: View) -> Result<Prediction> {
        let f = self.frame_size();
        let (framed, record) = preprocess_to(image, f);
        let stack = self.heatmaps(&framed)?;
        let network = decode(&stack, view, self.tau, Frame::new(f, f, (1.0, 1.0)))?;
        let landmarks = to_original_frame(&network, &record)?;
        let lv_length_mm = if view.is_lax() { lv_length(&landmarks).ok() } else { None };
        Ok(Prediction { landmarks, network, record, lv_length_mm })
    }
}
