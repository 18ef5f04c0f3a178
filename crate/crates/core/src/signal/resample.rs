//! Spectral (FFT) downsampling. Truncating the spectrum is the anti-alias
//! filter, so no separate low-pass stage is needed.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{ensure_finite, RawRecording};
use crate::error::{Error, Result};

/// Output length for `n` samples taken from `from_hz` to `to_hz` (floored).
pub fn resampled_len(n: usize, from_hz: f64, to_hz: f64) -> usize {
    let exact = n as f64 * to_hz / from_hz;
    // guard against 999.9999999 for ratios that are exact in decimal
    (exact + 1e-9).floor() as usize
}

pub fn resample(rec: &RawRecording, target_hz: f64) -> Result<RawRecording> {
    ensure_finite(rec)?;
    let from = rec.sampling_rate_hz;
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::Config(format!("target rate must be positive, got {target_hz}")));
    }
    if target_hz > from {
        return Err(Error::Config(format!(
            "upsampling from {from} Hz to {target_hz} Hz is not supported"
        )));
    }
    if target_hz == from {
        return Ok(rec.clone());
    }
    let n = rec.samples();
    let m = resampled_len(n, from, target_hz);
    if m == 0 {
        return Err(Error::Config(format!(
            "{n} samples at {from} Hz leave nothing at {target_hz} Hz"
        )));
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(m);
    let mut data = ndarray::Array2::<f64>::zeros((rec.channels(), m));
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for (src, mut dst) in rec.data.rows().into_iter().zip(data.rows_mut()) {
        for (s, &v) in spec.iter_mut().zip(src.iter()) {
            *s = Complex64::new(v, 0.0);
        }
        fwd.process(&mut spec);
        let half = m / 2;
        for (k, o) in out.iter_mut().enumerate() {
            *o = if m % 2 == 0 && k == half {
                Complex64::new(spec[half].re, 0.0)
            } else if k <= half {
                spec[k]
            } else {
                spec[n - (m - k)]
            };
        }
        inv.process(&mut out);
        for (d, o) in dst.iter_mut().zip(&out) {
            *d = o.re / n as f64;
        }
    }

    let ratio = target_hz / from;
    let onsets = rec
        .trial_onsets
        .iter()
        .map(|&o| (o as f64 * ratio + 1e-9).floor() as usize)
        .collect();
    Ok(RawRecording {
        subject_id: rec.subject_id.clone(),
        channel_labels: rec.channel_labels.clone(),
        sampling_rate_hz: target_hz,
        data,
        trial_onsets: onsets,
        trial_labels: rec.trial_labels.clone(),
    })
}
