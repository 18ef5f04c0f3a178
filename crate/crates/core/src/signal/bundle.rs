//! Trial-bundle directory format.
//!
//! ```text
//! <bundle>/meta.json          format version, montage, rates, per-trial records
//! <bundle>/subject_000.f32    trials x channels x samples, little-endian f32
//! <bundle>/subject_001.f32    ...
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Domain, EpochedTrial, TrialSet};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT_VERSION: &str = "1";
const META_FILE: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    format_version: String,
    class_count: usize,
    sampling_rate_hz: f64,
    montage: Vec<String>,
    channels: usize,
    samples: usize,
    subjects: Vec<SubjectEntry>,
    trials: Vec<TrialEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    file: String,
    trials: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialEntry {
    subject: String,
    /// Position inside the subject's payload file.
    index: usize,
    label: Option<usize>,
    domain: Domain,
}

pub fn save_trial_bundle(set: &TrialSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    set.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (channels, samples) = set.trial_shape().unwrap_or((set.montage.len(), 0));

    let ids = set.subject_ids();
    let mut payloads: HashMap<&str, Vec<u8>> = HashMap::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut trials = Vec::with_capacity(set.len());
    for t in &set.trials {
        let count = counts.entry(t.subject_id.as_str()).or_default();
        trials.push(TrialEntry {
            subject: t.subject_id.clone(),
            index: *count,
            label: t.label,
            domain: t.domain,
        });
        *count += 1;
        let buf = payloads.entry(t.subject_id.as_str()).or_default();
        buf.reserve(channels * samples * 4);
        for v in t.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut subjects = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let file = format!("subject_{i:03}.f32");
        let path = dir.join(&file);
        fs::write(&path, &payloads[id.as_str()]).map_err(|e| Error::io(&path, e))?;
        subjects.push(SubjectEntry {
            id: id.clone(),
            file,
            trials: counts[id.as_str()],
        });
    }

    let meta = BundleMeta {
        format_version: BUNDLE_FORMAT_VERSION.to_string(),
        class_count: set.class_count,
        sampling_rate_hz: set.sampling_rate_hz,
        montage: set.montage.clone(),
        channels,
        samples,
        subjects,
        trials,
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_trial_bundle(dir: impl AsRef<Path>) -> Result<TrialSet> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;

    // Check the version before the full schema so newer layouts fail cleanly.
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_str()) {
        Some(BUNDLE_FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::Version {
                found: other.to_string(),
                supported: BUNDLE_FORMAT_VERSION.to_string(),
            })
        }
        None => return Err(Error::format(&meta_path, "missing format_version")),
    }
    let meta: BundleMeta =
        serde_json::from_value(raw).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.channels != meta.montage.len() {
        return Err(Error::format(
            &meta_path,
            format!(
                "channels = {} but montage has {} labels",
                meta.channels,
                meta.montage.len()
            ),
        ));
    }

    let per_trial = meta.channels * meta.samples;
    let mut payloads: HashMap<&str, (Vec<f32>, usize)> = HashMap::new();
    for s in &meta.subjects {
        let path = dir.join(&s.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = s.trials * per_trial * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &path,
                format!(
                    "shape mismatch: metadata implies {} trials x {} x {} = {} floats, payload holds {} bytes",
                    s.trials, meta.channels, meta.samples, s.trials * per_trial, bytes.len()
                ),
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if payloads.insert(s.id.as_str(), (values, s.trials)).is_some() {
            return Err(Error::format(&meta_path, format!("subject {:?} listed twice", s.id)));
        }
    }

    let mut trials = Vec::with_capacity(meta.trials.len());
    for (i, t) in meta.trials.iter().enumerate() {
        let (values, n) = payloads.get(t.subject.as_str()).ok_or_else(|| {
            Error::format(&meta_path, format!("trial {i} references unknown subject {:?}", t.subject))
        })?;
        if t.index >= *n {
            return Err(Error::format(
                &meta_path,
                format!("trial {i} index {} beyond {n} stored trials", t.index),
            ));
        }
        let chunk = &values[t.index * per_trial..(t.index + 1) * per_trial];
        let data = Array2::from_shape_vec((meta.channels, meta.samples), chunk.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        trials.push(EpochedTrial {
            subject_id: t.subject.clone(),
            data,
            label: t.label,
            domain: t.domain,
        });
    }
    TrialSet::new(trials, meta.class_count, meta.montage, meta.sampling_rate_hz)
}
