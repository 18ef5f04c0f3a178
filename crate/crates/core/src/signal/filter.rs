//! Zero-phase Butterworth band-pass filtering (second-order sections,
//! forward-backward application with odd-extension padding).

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::{ensure_finite, RawRecording};
use crate::error::{Error, Result};

/// Prototype order; the band-pass has twice as many poles.
const ORDER: usize = 4;

/// One second-order section, `a0` normalized to 1, transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// State after a unit step has settled.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[2] * g]
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = self.a[0] + z_inv * (self.a[1] + z_inv * self.a[2]);
        num / den
    }
}

/// Designs a digital Butterworth band-pass as cascaded biquads.
///
/// The analog low-pass prototype is shifted to the prewarped band, mapped
/// through the bilinear transform and normalized to unit gain at the
/// geometric band centre.
pub fn design_bandpass(low_hz: f64, high_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edges must satisfy 0 < low < high < fs/2 (got {low_hz}, {high_hz}, fs={fs})"
        )));
    }
    let k = 2.0 * fs;
    let w1 = k * (PI * low_hz / fs).tan();
    let w2 = k * (PI * high_hz / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    let mut upper_poles = Vec::with_capacity(ORDER);
    for i in 0..ORDER {
        let theta = PI * (2 * i + ORDER + 1) as f64 / (2 * ORDER) as f64;
        let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
        let disc = (p * p - w0_sq).sqrt();
        for s in [p + disc, p - disc] {
            let z = (k + s) / (k - s);
            if z.im > 0.0 {
                upper_poles.push(z);
            }
        }
    }
    debug_assert_eq!(upper_poles.len(), ORDER);

    let mut sections: Vec<Biquad> = upper_poles
        .iter()
        .map(|z| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * z.re, z.norm_sqr()],
        })
        .collect();

    let centre = (w0_sq.sqrt() / k).atan() * 2.0;
    let z_inv = Complex64::from_polar(1.0, -centre);
    let gain: f64 = sections.iter().map(|s| s.response(z_inv).norm()).product();
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(sections)
}

fn sosfilt_in_place(sections: &[Biquad], x: &mut [f64]) {
    let mut scale = x.first().copied().unwrap_or(0.0);
    for sec in sections {
        let st = sec.step_state();
        let (mut s1, mut s2) = (st[0] * scale, st[1] * scale);
        scale *= sec.dc_gain();
        for v in x.iter_mut() {
            let xin = *v;
            let y = sec.b[0] * xin + s1;
            s1 = sec.b[1] * xin - sec.a[1] * y + s2;
            s2 = sec.b[2] * xin - sec.a[2] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd extension of `padlen` samples per side.
pub fn filtfilt(sections: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((0..pad).map(|i| 2.0 * x[0] - x[pad - i]));
    ext.extend_from_slice(x);
    ext.extend((0..pad).map(|i| 2.0 * x[n - 1] - x[n - 2 - i]));

    sosfilt_in_place(sections, &mut ext);
    ext.reverse();
    sosfilt_in_place(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase band-pass of every channel.
pub fn bandpass_filter(rec: &RawRecording, low_hz: f64, high_hz: f64) -> Result<RawRecording> {
    ensure_finite(rec)?;
    let fs = rec.sampling_rate_hz;
    let sections = design_bandpass(low_hz, high_hz, fs)?;
    // roughly three periods of the lower edge
    let padlen = (3.0 * fs / low_hz).ceil() as usize;
    let mut out = rec.clone();
    for mut row in out.data.rows_mut() {
        let y = filtfilt(&sections, &row.to_vec(), padlen);
        row.assign(&ndarray::ArrayView1::from(&y));
    }
    Ok(out)
}
