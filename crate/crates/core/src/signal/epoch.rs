use log::warn;

use super::{Domain, EpochedTrial, RawRecording, TrialSet};
use crate::error::{Error, Result};

/// Result of slicing a recording into trials.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub set: TrialSet,
    /// Onsets dropped because `onset + epoch_len` ran past the recording.
    pub skip_count: usize,
}

/// Cuts one trial of `epoch_len` samples at every onset.
///
/// Every trial gets `domain`; labels come from the recording when present.
pub fn epoch(
    rec: &RawRecording,
    epoch_len: usize,
    class_count: usize,
    domain: Domain,
) -> Result<EpochOutcome> {
    if epoch_len == 0 {
        return Err(Error::Config("epoch length must be positive".into()));
    }
    rec.validate()?;
    let n = rec.samples();
    let mut trials = Vec::with_capacity(rec.trial_onsets.len());
    let mut skip_count = 0;
    for (i, &onset) in rec.trial_onsets.iter().enumerate() {
        if onset + epoch_len > n {
            skip_count += 1;
            continue;
        }
        let slice = rec.data.slice(ndarray::s![.., onset..onset + epoch_len]);
        trials.push(EpochedTrial {
            subject_id: rec.subject_id.clone(),
            data: slice.mapv(|v| v as f32),
            label: rec.trial_labels.as_ref().map(|l| l[i]),
            domain,
        });
    }
    if skip_count > 0 {
        warn!(
            "subject {}: skipped {skip_count} trial(s) overrunning the recording",
            rec.subject_id
        );
    }
    let set = TrialSet::new(
        trials,
        class_count,
        rec.channel_labels.clone(),
        rec.sampling_rate_hz,
    )?;
    Ok(EpochOutcome { set, skip_count })
}
