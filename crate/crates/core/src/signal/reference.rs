use std::ops::Range;

use super::{ensure_finite, RawRecording};
use crate::error::{Error, Result};

/// Common average reference followed by per-epoch baseline correction.
///
/// Epoch `i` spans `[onset_i, onset_{i+1})` (the last one runs to the end of
/// the recording); `baseline_window` is relative to each onset. A recording
/// without onsets is treated as a single epoch starting at sample 0.
pub fn car_and_baseline(rec: &RawRecording, baseline_window: Range<usize>) -> Result<RawRecording> {
    ensure_finite(rec)?;
    if baseline_window.is_empty() {
        return Err(Error::Config("baseline window is empty".into()));
    }
    let n = rec.samples();
    let mut onsets = if rec.trial_onsets.is_empty() {
        vec![0]
    } else {
        rec.trial_onsets.clone()
    };
    onsets.sort_unstable();
    onsets.dedup();

    let mut out = rec.clone();
    let c = rec.channels() as f64;
    for mut col in out.data.columns_mut() {
        let mean = col.sum() / c;
        col.mapv_inplace(|v| v - mean);
    }

    for (i, &start) in onsets.iter().enumerate() {
        let end = onsets.get(i + 1).copied().unwrap_or(n).min(n);
        let (b0, b1) = (start + baseline_window.start, start + baseline_window.end);
        if b1 > end {
            return Err(Error::Config(format!(
                "baseline window {baseline_window:?} overruns epoch [{start}, {end})"
            )));
        }
        for mut row in out.data.rows_mut() {
            let base = row.slice(ndarray::s![b0..b1]).mean().unwrap_or(0.0);
            row.slice_mut(ndarray::s![start..end]).mapv_inplace(|v| v - base);
        }
    }
    Ok(out)
}
