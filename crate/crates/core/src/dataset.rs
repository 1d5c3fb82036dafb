//! Dataset manifests, the on-disk image format and VIA annotation ingest.
//!
//! Images are stored as raw little-endian f32 (`*.f32`) next to a JSON
//! sidecar (`*.json`) holding `{height, width, spacing_mm}`. Binary PGM
//! (8- or 16-bit) is accepted on read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::image::{Image, ImageGeometry};
use crate::landmarks::{Frame, LandmarkSet, Point, Sequence, View};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Every slot label accepted in annotation files.
pub const VIA_LABELS: [&str; 10] = ["A_P", "I_P", "APEX", "IL_P", "AS_P", "AL_P", "IS_P", "A_RVI", "P_RVI", "C_LV"];

/// One landmark slot as stored in a manifest; `x` is the column, `y` the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub name: String,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub view: View,
    pub sequence: Sequence,
    pub patient_id: String,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: (f64, f64),
    pub landmarks: Vec<SlotRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub samples: Vec<ManifestEntry>,
}

/// A loaded training/evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub sequence: Sequence,
    pub patient_id: String,
}

impl Sample {
    pub fn view(&self) -> View {
        self.landmarks.view
    }
}

/// Anything carrying a patient id, for patient-level splitting.
pub trait PatientKeyed {
    fn patient_id(&self) -> &str;
}

impl PatientKeyed for ManifestEntry {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

impl PatientKeyed for Sample {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

impl ManifestEntry {
    pub fn frame(&self) -> Frame {
        Frame::new(self.height, self.width, self.spacing_mm)
    }

    pub fn from_landmarks(
        image: String,
        sequence: Sequence,
        patient_id: String,
        landmarks: &LandmarkSet,
    ) -> Self {
        let records = landmarks
            .view
            .slot_names()
            .iter()
            .zip(&landmarks.points)
            .map(|(name, p)| SlotRecord {
                name: name.to_string(),
                present: p.is_some(),
                x: p.map(|p| p.col),
                y: p.map(|p| p.row),
            })
            .collect();
        Self {
            image,
            view: landmarks.view,
            sequence,
            patient_id,
            height: landmarks.frame.height,
            width: landmarks.frame.width,
            spacing_mm: landmarks.frame.spacing_mm,
            landmarks: records,
        }
    }

    pub fn landmark_set(&self) -> Result<LandmarkSet> {
        let bad = |m: String| Error::Ingest { file: self.image.clone(), message: m };
        if self.patient_id.is_empty() {
            return Err(bad("empty patient id".into()));
        }
        if self.landmarks.len() != 3 {
            return Err(bad(format!("expected 3 landmark slots, found {}", self.landmarks.len())));
        }
        let mut points = [None; 3];
        for (k, (rec, expected)) in self.landmarks.iter().zip(self.view.slot_names()).enumerate() {
            if self.view.slot_index(&rec.name) != Some(k) {
                return Err(bad(format!("slot {k} of a {} image must be {expected}, found {}", self.view, rec.name)));
            }
            points[k] = match (rec.present, rec.x, rec.y) {
                (true, Some(x), Some(y)) => Some(Point::new(y, x)),
                (false, None, None) => None,
                _ => return Err(bad(format!("slot {} has inconsistent presence and coordinates", rec.name))),
            };
        }
        LandmarkSet::new(self.view, self.frame(), points).map_err(|e| bad(e.to_string()))
    }

    pub fn load(&self, root: &Path) -> Result<Sample> {
        let image = read_image(&root.join(&self.image), Some(self.spacing_mm))?;
        if (image.height(), image.width()) != (self.height, self.width) {
            return Err(Error::Ingest {
                file: self.image.clone(),
                message: format!(
                    "manifest says {}×{}, image is {}×{}",
                    self.height,
                    self.width,
                    image.height(),
                    image.width()
                ),
            });
        }
        Ok(Sample {
            image,
            landmarks: self.landmark_set()?,
            sequence: self.sequence,
            patient_id: self.patient_id.clone(),
        })
    }
}

impl DatasetManifest {
    pub fn new(samples: Vec<ManifestEntry>) -> Self {
        Self { schema_version: SCHEMA_VERSION, samples }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Ingest {
                file: path.display().to_string(),
                message: format!("manifest schema {} is not supported", m.schema_version),
            });
        }
        for e in &m.samples {
            e.landmark_set()?;
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Load every sample; relative image paths resolve against `root`.
    pub fn load_samples(&self, root: &Path) -> Result<Vec<Sample>> {
        self.samples.iter().map(|e| e.load(root)).collect()
    }
}

/// Read a manifest file and all its images.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest.load_samples(root)?;
    Ok((manifest, samples))
}

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("json")
}

/// Write `image` as `path` (raw f32 LE) plus its JSON sidecar.
pub fn write_raw(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * image.pixels().len());
    for v in image.pixels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string(&image.geometry())?).map_err(|e| Error::io(&side, e))
}

pub fn decode_raw(bytes: &[u8], geometry: ImageGeometry) -> Result<Image> {
    if bytes.len() != 4 * geometry.height * geometry.width {
        return Err(Error::Usage(format!(
            "raw payload of {} bytes does not match {}×{} f32 pixels",
            bytes.len(),
            geometry.height,
            geometry.width
        )));
    }
    let px = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Image::new(geometry.height, geometry.width, px, geometry.spacing_mm)
}

/// Load a raw-f32 or PGM image. PGM carries no spacing, so `spacing` (or
/// 1 mm) applies to it.
pub fn read_image(path: &Path, spacing: Option<(f64, f64)>) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes, spacing.unwrap_or((1.0, 1.0)))
            .map_err(|m| Error::Ingest { file: path.display().to_string(), message: m });
    }
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let geometry: ImageGeometry = serde_json::from_str(&text)?;
    decode_raw(&bytes, geometry)
}

fn parse_pgm(bytes: &[u8], spacing: (f64, f64)) -> std::result::Result<Image, String> {
    // header: magic, width, height, maxval, each separated by whitespace,
    // with '#' comments; a single whitespace byte precedes the raster
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated PGM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| "non-ASCII PGM header")?.to_string());
    }
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    let depth = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(i..).unwrap_or_default();
    if raster.len() < w * h * depth {
        return Err(format!("PGM raster has {} bytes, needs {}", raster.len(), w * h * depth));
    }
    let px = if depth == 1 {
        raster[..w * h].iter().map(|&v| v as f32).collect()
    } else {
        raster[..2 * w * h].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32).collect()
    };
    Image::new(h, w, px, spacing).map_err(|e| e.to_string())
}

/// Settings for [`ingest_via`].
#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub view: View,
    pub sequence: Sequence,
    /// Directory the annotated image files live in.
    pub image_dir: PathBuf,
    /// Spacing for images that do not carry one (PGM).
    pub default_spacing_mm: (f64, f64),
}

/// Convert a VIA project or annotation export into manifest entries, one
/// per annotated file. Image paths are recorded relative to `image_dir`;
/// patient ids come from a `patient_id` file attribute, else the file stem.
pub fn ingest_via(via_json: &str, opts: &IngestOptions) -> Result<Vec<ManifestEntry>> {
    let root: Value = serde_json::from_str(via_json)?;
    let files = root.get("_via_img_metadata").unwrap_or(&root);
    let files = files
        .as_object()
        .ok_or_else(|| Error::Ingest { file: "<via>".into(), message: "expected an object of annotated files".into() })?;
    let mut entries = Vec::with_capacity(files.len());
    for (key, meta) in files {
        let filename = meta.get("filename").and_then(Value::as_str).unwrap_or(key).to_string();
        let bad = |m: String| Error::Ingest { file: filename.clone(), message: m };
        let spacing = meta
            .pointer("/file_attributes/spacing_mm")
            .and_then(Value::as_str)
            .map(parse_spacing)
            .transpose()
            .map_err(bad)?
            .unwrap_or(opts.default_spacing_mm);
        let image = read_image(&opts.image_dir.join(&filename), Some(spacing))?;
        let frame = Frame::new(image.height(), image.width(), image.spacing_mm());
        let mut points = [None; 3];
        for region in meta.get("regions").and_then(Value::as_array).map(Vec::as_slice).unwrap_or_default() {
            let shape = &region["shape_attributes"];
            if shape.get("name").and_then(Value::as_str) != Some("point") {
                return Err(bad(format!("only point regions are supported, found {}", shape["name"])));
            }
            let label = region.pointer("/region_attributes/label").and_then(Value::as_str).unwrap_or("");
            if !VIA_LABELS.contains(&label) {
                return Err(bad(format!("unknown label {label:?}; valid labels are {}", VIA_LABELS.join(", "))));
            }
            let k = opts.view.slot_index(label).ok_or_else(|| {
                bad(format!(
                    "label {label} does not belong to a {} image; valid labels are {}",
                    opts.view,
                    opts.view.slot_names().map(|s| s.replace('-', "_")).join(", ")
                ))
            })?;
            if points[k].is_some() {
                return Err(bad(format!("duplicate {label} annotation")));
            }
            let coord = |f: &str| shape.get(f).and_then(Value::as_f64).ok_or_else(|| bad(format!("point without {f}")));
            points[k] = Some(Point::new(coord("cy")?, coord("cx")?));
        }
        let set = LandmarkSet::new(opts.view, frame, points).map_err(|e| bad(e.to_string()))?;
        let patient = meta
            .pointer("/file_attributes/patient_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| Path::new(&filename).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        entries.push(ManifestEntry::from_landmarks(filename, opts.sequence, patient, &set));
    }
    Ok(entries)
}

fn parse_spacing(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<f64> = s.split([',', 'x', ' ']).filter(|p| !p.is_empty()).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| format!("bad spacing {s:?}"))?;
    match parts[..] {
        [r, c] => Ok((r, c)),
        [v] => Ok((v, v)),
        _ => Err(format!("bad spacing {s:?}")),
    }
}

/// Group sample indices by patient id, in first-appearance order.
pub fn patients<T: PatientKeyed>(items: &[T]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        map.entry(it.patient_id().to_string()).or_default().push(i);
    }
    map
}
