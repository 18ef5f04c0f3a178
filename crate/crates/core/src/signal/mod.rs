//! EEG data model, trial-bundle storage and the preprocessing chain
//! (band-pass, resampling, common average reference, baseline correction).

mod bundle;
mod epoch;
mod filter;
mod reference;
mod resample;

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{load_trial_bundle, save_trial_bundle, BUNDLE_FORMAT_VERSION};
pub use epoch::{epoch, EpochOutcome};
pub use filter::{bandpass_filter, design_bandpass, filtfilt, Biquad};
pub use reference::car_and_baseline;
pub use resample::{resample, resampled_len};

/// Which side of the adaptation split a trial belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A continuous (or concatenated) multichannel recording before epoching.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub channel_labels: Vec<String>,
    pub sampling_rate_hz: f64,
    /// channels x samples, microvolts.
    pub data: Array2<f64>,
    pub trial_onsets: Vec<usize>,
    pub trial_labels: Option<Vec<usize>>,
}

impl RawRecording {
    /// Builds a recording after checking the structural invariants.
    pub fn new(
        subject_id: impl Into<String>,
        channel_labels: Vec<String>,
        sampling_rate_hz: f64,
        data: Array2<f64>,
        trial_onsets: Vec<usize>,
        trial_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let rec = RawRecording {
            subject_id: subject_id.into(),
            channel_labels,
            sampling_rate_hz,
            data,
            trial_onsets,
            trial_labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if self.channel_labels.len() != self.data.nrows() {
            return Err(Error::Shape(format!(
                "{} channel labels for {} data rows",
                self.channel_labels.len(),
                self.data.nrows()
            )));
        }
        check_unique_labels(&self.channel_labels)?;
        if let Some(labels) = &self.trial_labels {
            if labels.len() != self.trial_onsets.len() {
                return Err(Error::Data(format!(
                    "{} labels for {} onsets",
                    labels.len(),
                    self.trial_onsets.len()
                )));
            }
        }
        check_finite(self.data.iter().copied(), &self.subject_id)
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }
}

/// One epoched trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochedTrial {
    pub subject_id: String,
    /// channels x samples.
    pub data: Array2<f32>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl EpochedTrial {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    /// Copy handed to an adaptation routine: label removed, marked as target.
    pub fn as_unlabeled_target(&self) -> EpochedTrial {
        EpochedTrial {
            subject_id: self.subject_id.clone(),
            data: self.data.clone(),
            label: None,
            domain: Domain::Target,
        }
    }
}

/// An ordered set of trials sharing shape, montage and sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<EpochedTrial>,
    pub class_count: usize,
    pub montage: Vec<String>,
    pub sampling_rate_hz: f64,
}

impl TrialSet {
    pub fn new(
        trials: Vec<EpochedTrial>,
        class_count: usize,
        montage: Vec<String>,
        sampling_rate_hz: f64,
    ) -> Result<Self> {
        let set = TrialSet {
            trials,
            class_count,
            montage,
            sampling_rate_hz,
        };
        set.validate()?;
        Ok(set)
    }

    /// An empty set that inherits montage and class count from `self`.
    pub fn empty_like(&self) -> TrialSet {
        TrialSet {
            trials: Vec::new(),
            class_count: self.class_count,
            montage: self.montage.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        check_unique_labels(&self.montage)?;
        let shape = self.trials.first().map(|t| t.data.dim());
        for (i, t) in self.trials.iter().enumerate() {
            let (c, s) = t.data.dim();
            if c == 0 || s == 0 {
                return Err(Error::Shape(format!("trial {i} has empty shape {c}x{s}")));
            }
            if Some((c, s)) != shape {
                return Err(Error::Shape(format!(
                    "trial {i} has shape {c}x{s}, expected {:?}",
                    shape.unwrap()
                )));
            }
            if c != self.montage.len() {
                return Err(Error::Shape(format!(
                    "trial {i} has {c} channels but montage lists {}",
                    self.montage.len()
                )));
            }
            if let Some(label) = t.label {
                if label >= self.class_count {
                    return Err(Error::Data(format!(
                        "trial {i} label {label} outside 0..{}",
                        self.class_count
                    )));
                }
            }
            check_finite(t.data.iter().copied(), &t.subject_id)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// (channels, samples) of the trials, if any.
    pub fn trial_shape(&self) -> Option<(usize, usize)> {
        self.trials.first().map(|t| t.data.dim())
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subject_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.trials
            .iter()
            .filter(|t| seen.insert(t.subject_id.clone()))
            .map(|t| t.subject_id.clone())
            .collect()
    }

    /// Splits into one set per subject, preserving the per-subject order.
    pub fn split_by_subject(&self) -> Vec<TrialSet> {
        self.subject_ids()
            .into_iter()
            .map(|id| TrialSet {
                trials: self
                    .trials
                    .iter()
                    .filter(|t| t.subject_id == id)
                    .cloned()
                    .collect(),
                ..self.empty_like()
            })
            .collect()
    }

    /// Concatenates sets that share montage/class count/sampling rate.
    pub fn concat(sets: &[TrialSet]) -> Result<TrialSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Data("cannot concatenate zero trial sets".into()))?;
        let mut out = first.empty_like();
        for s in sets {
            if s.montage != first.montage || s.class_count != first.class_count {
                return Err(Error::Shape(
                    "trial sets differ in montage or class count".into(),
                ));
            }
            if s.sampling_rate_hz != first.sampling_rate_hz {
                return Err(Error::Shape("trial sets differ in sampling rate".into()));
            }
            out.trials.extend(s.trials.iter().cloned());
        }
        out.validate()?;
        Ok(out)
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.trials.iter().map(|t| t.label).collect()
    }
}

/// Stage parameters for [`preprocess_trial_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub target_hz: f64,
    /// Fraction of each epoch (from its start) used as the baseline window.
    pub baseline_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            low_hz: 8.0,
            high_hz: 30.0,
            target_hz: 250.0,
            baseline_fraction: 0.1,
        }
    }
}

/// Runs band-pass, resampling, CAR and baseline correction on every trial.
///
/// Each trial is processed as its own recording so filter transients never
/// cross trial boundaries.
pub fn preprocess_trial_set(set: &TrialSet, cfg: &PreprocessConfig) -> Result<TrialSet> {
    if !(cfg.baseline_fraction > 0.0 && cfg.baseline_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "baseline_fraction must be in (0, 1], got {}",
            cfg.baseline_fraction
        )));
    }
    let mut out = set.empty_like();
    out.sampling_rate_hz = cfg.target_hz;
    for t in &set.trials {
        let rec = RawRecording {
            subject_id: t.subject_id.clone(),
            channel_labels: set.montage.clone(),
            sampling_rate_hz: set.sampling_rate_hz,
            data: t.data.mapv(f64::from),
            trial_onsets: vec![0],
            trial_labels: t.label.map(|l| vec![l]),
        };
        let rec = bandpass_filter(&rec, cfg.low_hz, cfg.high_hz)?;
        let rec = resample(&rec, cfg.target_hz)?;
        let n = rec.samples();
        let base_len = ((n as f64 * cfg.baseline_fraction).round() as usize).clamp(1, n);
        let rec = car_and_baseline(&rec, 0..base_len)?;
        out.trials.push(EpochedTrial {
            subject_id: t.subject_id.clone(),
            data: rec.data.mapv(|v| v as f32),
            label: t.label,
            domain: t.domain,
        });
    }
    Ok(out)
}

fn check_unique_labels(labels: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Data(format!("duplicate channel label {l:?}")));
        }
    }
    Ok(())
}

fn check_finite<F: Into<f64>>(values: impl Iterator<Item = F>, who: &str) -> Result<()> {
    for (i, v) in values.enumerate() {
        let v: f64 = v.into();
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite sample {v} at flat index {i} (subject {who})"
            )));
        }
    }
    Ok(())
}

pub(crate) fn ensure_finite(rec: &RawRecording) -> Result<()> {
    check_finite(rec.data.iter().copied(), &rec.subject_id)
}
