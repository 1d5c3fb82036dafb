//! Binary checkpoint file.
//!
//! Layout: `b"CMLK"`, version (u32 LE), header length (u32 LE), JSON header,
//! then every tensor of the header's table as little-endian f32 in table
//! order. The table lists all parameters followed by the running mean and
//! variance of each batch-norm layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormState;
use crate::error::{CheckpointError, Error, Result};
use crate::landmarks::View;
use crate::tensor::Tensor;
use crate::unet::{norm_layout, param_layout, ArchConfig, UNet};

pub const MAGIC: [u8; 4] = *b"CMLK";
pub const VERSION: u32 = 1;

/// Training provenance and the inference settings a model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// FNV-1a digest of the serialized training configuration.
    pub config_digest: String,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    /// Side of the square network input frame.
    pub frame_size: usize,
    pub sigma_px: f64,
    pub views: Vec<View>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            config_digest: String::new(),
            epoch: 0,
            val_loss: None,
            frame_size: crate::preprocess::FRAME_SIZE,
            sigma_px: crate::heatmap::DEFAULT_SIGMA_PX,
            views: View::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: UNet<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
    batches_tracked: Vec<u64>,
    provenance: Provenance,
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl ModelCheckpoint {
    pub fn new(model: UNet<f32>, provenance: Provenance) -> Self {
        Self { model, provenance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let mut tensors: Vec<TensorEntry> = model
            .param_names()
            .zip(model.params())
            .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect();
        for (name, st) in model.norm_names().zip(model.norms()) {
            let c = st.channels();
            tensors.push(TensorEntry { name: format!("{name}.running_mean"), shape: vec![c] });
            tensors.push(TensorEntry { name: format!("{name}.running_var"), shape: vec![c] });
        }
        let header = Header {
            arch: model.arch().clone(),
            tensors,
            batches_tracked: model.norms().iter().map(|s| s.batches_tracked).collect(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * model.num_parameters());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f32]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for t in model.params() {
            put(t.data());
        }
        for st in model.norms() {
            put(&st.running_mean);
            put(&st.running_var);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
        }
        let hlen = cur.u32()? as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(CheckpointError::Header)?;

        let inconsistent = |m: String| -> Error { CheckpointError::Inconsistent(m).into() };
        let arch = header.arch;
        let expected_params = param_layout(&arch).map_err(|e| inconsistent(e.to_string()))?;
        let expected_norms = norm_layout(&arch).map_err(|e| inconsistent(e.to_string()))?;
        let mut expected: Vec<(String, Vec<usize>)> = expected_params.clone();
        for (name, c) in &expected_norms {
            expected.push((format!("{name}.running_mean"), vec![*c]));
            expected.push((format!("{name}.running_var"), vec![*c]));
        }
        if header.tensors.len() != expected.len() {
            return Err(inconsistent(format!(
                "architecture implies {} tensors, table lists {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(inconsistent(format!(
                    "table entry {} {:?} where the architecture requires {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        if header.batches_tracked.len() != expected_norms.len() {
            return Err(inconsistent("batch-norm counter list has the wrong length".into()));
        }

        let needed: usize = expected.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
        let available = bytes.len() - cur.pos;
        if available < needed {
            return Err(CheckpointError::Truncated { needed, available }.into());
        }
        if available > needed {
            return Err(CheckpointError::TrailingBytes(available - needed).into());
        }
        let mut params = Vec::with_capacity(expected_params.len());
        for (_, shape) in &expected_params {
            let n = shape.iter().product();
            params.push(Tensor::new(shape, cur.f32s(n)?)?);
        }
        let mut norms = Vec::with_capacity(expected_norms.len());
        for ((_, c), tracked) in expected_norms.iter().zip(&header.batches_tracked) {
            let running_mean = cur.f32s(*c)?;
            let running_var = cur.f32s(*c)?;
            norms.push(BatchNormState { running_mean, running_var, batches_tracked: *tracked });
        }
        let model = UNet::from_parts(arch, params, norms).map_err(|e| inconsistent(e.to_string()))?;
        Ok(Self { model, provenance: header.provenance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(CheckpointError::Truncated { needed: n, available }.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
