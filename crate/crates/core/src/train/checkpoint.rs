//! Single-file checkpoints.
//!
//! ```text
//! u64 LE   manifest length in bytes
//! [..]     manifest JSON
//! [..]     tensor payloads, little-endian f32, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochDiagnostics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::Parameters;

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub channels: usize,
    pub class_count: usize,
    pub params: ModelParams,
    pub diagnostics: Vec<EpochDiagnostics>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in floats from the start of the payload section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    seed: u64,
    channels: usize,
    class_count: usize,
    tensors: Vec<TensorEntry>,
    diagnostics: Vec<EpochDiagnostics>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.named_tensors() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.len();
            for &v in &t.data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            seed: self.seed,
            channels: self.channels,
            class_count: self.class_count,
            tensors,
            diagnostics: self.diagnostics.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length header".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(8..8 + n)
            .ok_or_else(|| bad(format!("manifest length {n} exceeds file size")))?;
        let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        match raw.get("format_version").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    found: other.into(),
                    supported: CHECKPOINT_FORMAT_VERSION.into(),
                })
            }
            None => return Err(bad("missing format_version".into())),
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[8 + n..];

        let mut params = ModelParams::init(&manifest.model, manifest.channels, manifest.class_count, 0)?;
        let mut slots = params.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, configuration implies {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        let mut total = 0;
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || slot.shape != entry.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, slot.shape
                )));
            }
            let len = slot.len();
            let chunk = payload
                .get(entry.offset * 4..(entry.offset + len) * 4)
                .ok_or_else(|| bad(format!("payload too short for tensor {}", entry.name)))?;
            for (v, b) in slot.data.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
            total += len;
        }
        if payload.len() != total * 4 {
            return Err(bad(format!(
                "payload holds {} bytes, manifest implies {}",
                payload.len(),
                total * 4
            )));
        }
        drop(slots);
        Ok(Checkpoint {
            model: manifest.model,
            train: manifest.train,
            epoch: manifest.epoch,
            seed: manifest.seed,
            channels: manifest.channels,
            class_count: manifest.class_count,
            params,
            diagnostics: manifest.diagnostics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
