//! Procedural cardiac phantoms with analytically known landmarks.
//!
//! Geometry is described in millimetres in a canonical, unrotated pose and
//! rendered by inverse-rotating 4×4 sub-pixel samples about the LV centre.
//! Landmarks are the forward-rotated canonical landmark positions.
//!
//! Canonical poses (rows grow downwards):
//! * SAX: circular-ish LV annulus, RV crescent on the image left spanning
//!   the anterior (upper) to posterior (lower) insertion angles.
//! * LAX: half-ellipsoid LV with the apex pointing up and the valve plane at
//!   the bottom, left atrium below it. CH4 adds an RV on the left, CH3 an
//!   aortic outflow next to the first valve point.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_raw, DatasetManifest, ManifestEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::{Frame, LandmarkSet, Point, Sequence, View};

const SUPERSAMPLE: usize = 4;
pub const DEFAULT_SIZE: usize = 96;
pub const SAMPLES_PER_PATIENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    /// Bright blood, dark myocardium.
    Cine,
    /// Bright myocardium, dark blood; the LGE/T1 stand-in for domain shift.
    Inverted,
}

impl Contrast {
    pub fn intensities(self) -> Intensities {
        match self {
            Contrast::Cine => Intensities { body: 0.18, myocardium: 0.35, blood: 1.0 },
            Contrast::Inverted => Intensities { body: 0.18, myocardium: 1.0, blood: 0.4 },
        }
    }

    pub fn sequence(self) -> Sequence {
        match self {
            Contrast::Cine => Sequence::Cine,
            Contrast::Inverted => Sequence::Lge,
        }
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cine" => Ok(Contrast::Cine),
            "inverted" => Ok(Contrast::Inverted),
            _ => Err(Error::Usage(format!("unknown contrast {s:?} (expected cine or inverted)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    /// Soft tissue inside the body outline; air outside is 0.
    pub body: f64,
    pub myocardium: f64,
    pub blood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub view: View,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    /// LV centre, (row, col) in mm; rotation pivot.
    pub lv_center_mm: (f64, f64),
    /// Base-to-endocardial-apex cavity length.
    pub lv_length_mm: f64,
    /// SAX cavity radius at the base; LAX half valve width.
    pub cavity_radius_mm: f64,
    pub wall_mm: f64,
    /// SAX cavity ellipticity in [0, 0.3).
    pub eccentricity: f64,
    /// Maximum RV cavity thickness (SAX crescent, CH4 half width).
    pub rv_thickness_mm: f64,
    /// Anterior and posterior RV insertion angles, degrees, y-up convention.
    pub rv_angles_deg: (f64, f64),
    /// SAX only: distance of the slice below the base.
    pub slice_offset_mm: f64,
    pub rotation_deg: f64,
    pub contrast: Contrast,
    pub intensities: Intensities,
    /// Linear shading ramp: gain runs from 1−a to 1+a across the image.
    pub bias_amplitude: f64,
    pub bias_direction_deg: f64,
    /// Noise σ as a fraction of the blood intensity.
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Air,
    Body,
    Myocardium,
    Blood,
}

impl PhantomParams {
    /// Draw parameters from the documented ranges for a `size`² 1 mm image.
    pub fn random<R: Rng>(view: View, contrast: Contrast, size: usize, rng: &mut R) -> Self {
        let s = size as f64 / DEFAULT_SIZE as f64;
        let half = size as f64 / 2.0;
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let (center_shift_col, length, radius) = match view {
            View::Sax => (6.0 * s, 60.0 * s, u(16.0, 18.0) * s),
            View::Ch4 => (9.0 * s, u(40.0, 48.0) * s, u(11.0, 13.5) * s),
            _ => (2.0 * s, u(40.0, 48.0) * s, u(11.0, 13.5) * s),
        };
        let slice_offset = if view == View::Sax {
            // one slice in ten lies beyond the apex
            if u(0.0, 1.0) < 0.1 {
                u(1.05, 1.4) * length
            } else {
                u(0.0, 0.4) * length
            }
        } else {
            0.0
        };
        let rv_thickness = if view == View::Ch4 { u(7.0, 9.0) * s } else { u(9.0, 13.0) * s };
        Self {
            view,
            height: size,
            width: size,
            spacing_mm: 1.0,
            lv_center_mm: (half + u(-4.0, 4.0) * s, half + center_shift_col + u(-4.0, 4.0) * s),
            lv_length_mm: length,
            cavity_radius_mm: radius,
            wall_mm: u(5.5, 8.0) * s,
            eccentricity: u(0.0, 0.15),
            rv_thickness_mm: rv_thickness,
            rv_angles_deg: (u(110.0, 130.0), u(230.0, 250.0)),
            slice_offset_mm: slice_offset,
            rotation_deg: u(-15.0, 15.0),
            contrast,
            intensities: contrast.intensities(),
            bias_amplitude: u(0.0, 0.4),
            bias_direction_deg: u(0.0, 360.0),
            noise_sigma: u(0.02, 0.06),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Phantom(m.to_string()));
        if self.height < crate::image::MIN_EXTENT || self.width < crate::image::MIN_EXTENT {
            return bad("image extents below the 16-pixel minimum");
        }
        if !(self.spacing_mm > 0.0) {
            return bad("pixel spacing must be positive");
        }
        if !(self.cavity_radius_mm > 0.0 && self.wall_mm > 0.0 && self.lv_length_mm > 0.0) {
            return bad("cavity radius, wall thickness and LV length must be positive");
        }
        if !(0.0..0.3).contains(&self.eccentricity) {
            return bad("eccentricity must lie in [0, 0.3)");
        }
        if !(self.rv_thickness_mm > 0.0) {
            return bad("RV thickness must be positive");
        }
        let (a, p) = self.rv_angles_deg;
        if !(a < p && p - a < 180.0 && p - a > 30.0) {
            return bad("RV insertion angles must satisfy anterior < posterior with a 30°–180° span");
        }
        if !(self.slice_offset_mm >= 0.0) || !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.bias_amplitude) {
            return bad("slice offset and noise must be nonnegative, bias amplitude in [0,1)");
        }
        Ok(())
    }

    fn pivot(&self) -> (f64, f64) {
        self.lv_center_mm
    }

    /// SAX cavity radius scale at the slice position; `None` past the apex.
    fn sax_taper(&self) -> Option<f64> {
        let z = self.slice_offset_mm / self.lv_length_mm;
        (z < 1.0).then(|| (1.0 - z * z).sqrt().max(0.35))
    }

    /// LV length (apex to valve midpoint) implied by the geometry, in mm.
    pub fn lv_length_measure_mm(&self) -> f64 {
        self.lv_length_mm + self.wall_mm
    }

    /// Landmarks in canonical pose, mm, (row, col).
    fn canonical_landmarks(&self) -> [Option<(f64, f64)>; 3] {
        let (cr, cc) = self.lv_center_mm;
        match self.view {
            View::Sax => {
                let Some(f) = self.sax_taper() else { return [None; 3] };
                let ro = self.cavity_radius_mm * f + self.wall_mm;
                let at = |deg: f64| {
                    let phi = deg.to_radians();
                    let r = self.ellipse_radius(ro, phi);
                    (cr - r * phi.sin(), cc + r * phi.cos())
                };
                let (a, p) = self.rv_angles_deg;
                [Some(at(a)), Some(at(p)), Some((cr, cc))]
            }
            _ => {
                let base_row = cr + self.lv_length_mm / 2.0;
                let a = self.cavity_radius_mm;
                [
                    Some((base_row, cc - a)),
                    Some((base_row, cc + a)),
                    Some((base_row - self.lv_length_mm - self.wall_mm, cc)),
                ]
            }
        }
    }

    /// Radius at angle `phi` (y-up) of an ellipse with minor semi-axis `r`,
    /// stretched along the column axis by the eccentricity.
    fn ellipse_radius(&self, r: f64, phi: f64) -> f64 {
        let (a, b) = (r * (1.0 + self.eccentricity), r);
        a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt()
    }

    fn tissue(&self, row: f64, col: f64) -> Tissue {
        let (h, w) = (self.height as f64 * self.spacing_mm, self.width as f64 * self.spacing_mm);
        let body = ((row - h / 2.0) / (0.48 * h)).powi(2) + ((col - w / 2.0) / (0.52 * w)).powi(2) <= 1.0;
        let heart = match self.view {
            View::Sax => self.sax_tissue(row, col),
            _ => self.lax_tissue(row, col),
        };
        match heart {
            Some(t) => t,
            None if body => Tissue::Body,
            None => Tissue::Air,
        }
    }

    fn sax_tissue(&self, row: f64, col: f64) -> Option<Tissue> {
        let f = self.sax_taper()?;
        let (cr, cc) = self.lv_center_mm;
        let (dr, dc) = (row - cr, col - cc);
        let rho = dr.hypot(dc);
        let phi = (-dr).atan2(dc);
        let ri = self.ellipse_radius(self.cavity_radius_mm * f, phi);
        let ro = self.ellipse_radius(self.cavity_radius_mm * f + self.wall_mm, phi);
        if rho < ri {
            return Some(Tissue::Blood);
        }
        if rho < ro {
            return Some(Tissue::Myocardium);
        }
        let (a, p) = (self.rv_angles_deg.0.to_radians(), self.rv_angles_deg.1.to_radians());
        let phi_pos = if phi < 0.0 { phi + 2.0 * PI } else { phi };
        if phi_pos > a && phi_pos < p {
            let taper = (PI * (phi_pos - a) / (p - a)).sin().sqrt();
            let t = self.rv_thickness_mm * f.sqrt() * taper;
            let wall = 3.0 * taper;
            if rho < ro + t {
                return Some(Tissue::Blood);
            }
            if rho < ro + t + wall {
                return Some(Tissue::Myocardium);
            }
        }
        None
    }

    fn lax_tissue(&self, row: f64, col: f64) -> Option<Tissue> {
        let (cr, cc) = self.lv_center_mm;
        let base_row = cr + self.lv_length_mm / 2.0;
        let along = base_row - row;
        let across = col - cc;
        let (a, l, wall) = (self.cavity_radius_mm, self.lv_length_mm, self.wall_mm);
        let inside = |x: f64, y: f64, rx: f64, ry: f64| (x / rx).powi(2) + (y / ry).powi(2) < 1.0;
        if along >= 0.0 {
            if inside(across, along, a, l) {
                return Some(Tissue::Blood);
            }
            if inside(across, along, a + wall, l + wall) {
                return Some(Tissue::Myocardium);
            }
        } else if inside(across, along + 0.8 * a, a + 2.0, 1.25 * a) {
            return Some(Tissue::Blood);
        }
        match self.view {
            View::Ch4 => {
                let rv_w = self.rv_thickness_mm;
                let rv_c = -(a + wall + rv_w + 2.5);
                let x = across - rv_c;
                if along >= 0.0 {
                    if inside(x, along, rv_w, 0.8 * l) {
                        return Some(Tissue::Blood);
                    }
                    if inside(x, along, rv_w + 2.5, 0.8 * l + 2.5) {
                        return Some(Tissue::Myocardium);
                    }
                } else if inside(x, along + 0.8 * a, rv_w, 1.1 * a) {
                    return Some(Tissue::Blood);
                }
            }
            View::Ch3 => {
                // outflow tract leaving the base up and to the left
                let (ox, oy) = (across + a + wall + 6.0, along - 2.0);
                let (s, c) = (0.35f64.sin(), 0.35f64.cos());
                let (u, v) = (c * ox + s * oy, -s * ox + c * oy);
                if inside(u, v, 6.0, 15.0) {
                    return Some(Tissue::Blood);
                }
                if inside(u, v, 8.0, 17.0) {
                    return Some(Tissue::Myocardium);
                }
            }
            _ => {}
        }
        None
    }
}

fn rotate_about(p: (f64, f64), pivot: (f64, f64), deg: f64) -> (f64, f64) {
    // positive angle turns counter-clockwise on screen (y up)
    let (s, c) = deg.to_radians().sin_cos();
    let (dy, dx) = (-(p.0 - pivot.0), p.1 - pivot.1);
    let (ry, rx) = (s * dx + c * dy, c * dx - s * dy);
    (pivot.0 - ry, pivot.1 + rx)
}

/// Render one phantom; `seed` drives the noise only.
pub fn gen_sample(params: &PhantomParams, seed: u64) -> Result<(Image, LandmarkSet)> {
    params.validate()?;
    let (h, w, sp) = (params.height, params.width, params.spacing_mm);
    let frame = Frame::new(h, w, (sp, sp));
    let pivot = params.pivot();

    let mut points = [None; 3];
    for (slot, lm) in points.iter_mut().zip(params.canonical_landmarks()) {
        if let Some(p) = lm {
            let (r, c) = rotate_about(p, pivot, params.rotation_deg);
            let pt = Point::new(r / sp, c / sp);
            if !frame.contains(pt) {
                return Err(Error::Phantom(format!("landmark at ({:.1}, {:.1}) px falls outside the image", pt.row, pt.col)));
            }
            *slot = Some(pt);
        }
    }
    let landmarks = LandmarkSet::new(params.view, frame, points)?;

    let lv = params.intensities;
    let value = |t: Tissue| match t {
        Tissue::Air => 0.0,
        Tissue::Body => lv.body,
        Tissue::Myocardium => lv.myocardium,
        Tissue::Blood => lv.blood,
    };
    let (bs, bc) = params.bias_direction_deg.to_radians().sin_cos();
    let half_extent = 0.5 * (h.max(w) as f64);
    let noise = Normal::new(0.0, params.noise_sigma * lv.blood.max(lv.myocardium)).map_err(|e| Error::Phantom(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(h * w);
    let sub = SUPERSAMPLE as f64;
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..SUPERSAMPLE {
                for j in 0..SUPERSAMPLE {
                    let y = (r as f64 + (i as f64 + 0.5) / sub - 0.5) * sp;
                    let x = (c as f64 + (j as f64 + 0.5) / sub - 0.5) * sp;
                    let (cy, cx) = rotate_about((y, x), pivot, -params.rotation_deg);
                    acc += value(params.tissue(cy, cx));
                }
            }
            let mean = acc / (sub * sub);
            let ramp = ((r as f64 - h as f64 / 2.0) * -bs + (c as f64 - w as f64 / 2.0) * bc) / half_extent;
            let gain = (1.0 + params.bias_amplitude * ramp.clamp(-1.0, 1.0)).max(0.05);
            let v = mean * gain + noise.sample(&mut rng);
            px.push(v.max(0.0) as f32);
        }
    }
    Ok((Image::new(h, w, px, (sp, sp))?, landmarks))
}

/// Options for [`gen_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    /// Relative CH2:CH3:CH4:SAX frequencies, realised by round-robin.
    pub mix: [usize; 4],
    pub contrast: Contrast,
    pub seed: u64,
    pub size: usize,
    /// Prefix for synthetic patient ids, so datasets can be merged.
    pub patient_prefix: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n: 100, mix: [1, 1, 1, 1], contrast: Contrast::Cine, seed: 0, size: DEFAULT_SIZE, patient_prefix: "P".into() }
    }
}

/// View of sample `i` under the round-robin expansion of `mix`.
pub fn round_robin_view(mix: &[usize; 4], i: usize) -> Option<View> {
    let total: usize = mix.iter().sum();
    if total == 0 {
        return None;
    }
    let mut k = i % total;
    for (view, &m) in View::ALL.iter().zip(mix) {
        if k < m {
            return Some(*view);
        }
        k -= m;
    }
    unreachable!()
}

/// Generate samples in memory: image, landmarks, patient id.
pub fn gen_samples(spec: &DatasetSpec) -> Result<Vec<crate::dataset::Sample>> {
    if spec.n == 0 {
        return Err(Error::Phantom("dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let view = round_robin_view(&spec.mix, i).ok_or_else(|| Error::Phantom("view mix is all zero".into()))?;
        let params = PhantomParams::random(view, spec.contrast, spec.size, &mut rng);
        let (image, landmarks) = gen_sample(&params, rng.random())?;
        out.push(crate::dataset::Sample {
            image,
            landmarks,
            sequence: spec.contrast.sequence(),
            patient_id: format!("{}{:04}", spec.patient_prefix, i / SAMPLES_PER_PATIENT),
        });
    }
    Ok(out)
}

/// Write a phantom dataset (raw images + `manifest.json`) into `dir`.
pub fn gen_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    write_samples(&gen_samples(spec)?, dir)
}

/// Write samples as `images/NNNNN.f32` plus `manifest.json` under `dir`.
pub fn write_samples(samples: &[crate::dataset::Sample], dir: &Path) -> Result<DatasetManifest> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.f32");
        write_raw(&dir.join(&rel), &s.image)?;
        entries.push(ManifestEntry::from_landmarks(rel, s.sequence, s.patient_id.clone(), &s.landmarks));
    }
    let manifest = DatasetManifest::new(entries);
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A beating LAX series: LV length follows a raised cosine from end
/// diastole (frame 0) to end systole (mid-series). Returns frames and their
/// true landmark sets.
pub fn gen_lax_series(base: &PhantomParams, frames: usize, shortening: f64, seed: u64) -> Result<Vec<(Image, LandmarkSet)>> {
    if !base.view.is_lax() {
        return Err(Error::Phantom("series generation needs a long-axis view".into()));
    }
    if !(0.0..0.5).contains(&shortening) {
        return Err(Error::Phantom("shortening fraction must lie in [0, 0.5)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|t| {
            let phase = 2.0 * PI * t as f64 / frames as f64;
            let mut p = base.clone();
            let ed_len = base.lv_length_measure_mm();
            let len = ed_len * (1.0 - shortening * 0.5 * (1.0 - phase.cos()));
            // the base stays put; only the apex moves
            p.lv_length_mm = len - base.wall_mm;
            p.lv_center_mm.0 = base.lv_center_mm.0 + (base.lv_length_mm - p.lv_length_mm) / 2.0;
            gen_sample(&p, rng.random())
        })
        .collect()
}
