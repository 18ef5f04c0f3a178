//! Synthetic stroke-like motor-imagery cohorts with a planted ERD effect.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{epoch, Domain, RawRecording, TrialSet};

pub const LEFT_ROI: [&str; 3] = ["FC3", "C3", "CP3"];
pub const MIDDLE_ROI: [&str; 3] = ["FCz", "Cz", "CPz"];
pub const RIGHT_ROI: [&str; 3] = ["FC4", "C4", "CP4"];

/// Background and mu amplitudes in microvolts.
const BACKGROUND_UV: f64 = 25.0;
const MU_UV: f64 = 10.0;
const SLOW_UV: f64 = 10.0;

/// 30-channel 10-20 montage.
pub fn default_montage() -> Vec<String> {
    [
        "FP1", "FP2", "F7", "F3", "Fz", "F4", "F8", "FT7", "FC3", "FCz", "FC4", "FT8", "T7", "C3",
        "Cz", "C4", "T8", "TP7", "CP3", "CPz", "CP4", "TP8", "P7", "P3", "Pz", "P4", "P8", "O1",
        "Oz", "O2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub subject_count: usize,
    pub trials_per_subject: usize,
    pub montage: Vec<String>,
    pub samples: usize,
    pub sampling_rate_hz: f64,
    /// Fractional drop of mu amplitude over the contralateral ROI.
    pub erd_depth: f64,
    /// Multiplier of the 1-4 Hz component on the affected hemisphere.
    pub slow_wave_gain: f64,
    /// Strength of per-subject gain and mixing perturbations.
    pub subject_jitter: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subject_count: 8,
            trials_per_subject: 40,
            montage: default_montage(),
            samples: 2000,
            sampling_rate_hz: 500.0,
            erd_depth: 0.6,
            slow_wave_gain: 1.5,
            subject_jitter: 0.3,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subject_count == 0 || self.trials_per_subject == 0 || self.samples == 0 {
            return Err(Error::Config(
                "subject_count, trials_per_subject and samples must be positive".into(),
            ));
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(Error::Config("sampling_rate_hz must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return Err(Error::Config(format!("erd_depth {} outside [0, 1]", self.erd_depth)));
        }
        if !(self.slow_wave_gain >= 0.0 && self.subject_jitter >= 0.0) {
            return Err(Error::Config(
                "slow_wave_gain and subject_jitter must be non-negative".into(),
            ));
        }
        let missing: Vec<&str> = LEFT_ROI
            .iter()
            .chain(&MIDDLE_ROI)
            .chain(&RIGHT_ROI)
            .filter(|l| !self.montage.iter().any(|m| m == *l))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "montage is missing ROI electrodes: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Midline,
}

fn side_of(label: &str) -> Side {
    match label.chars().last() {
        Some(c) if c.is_ascii_digit() => {
            if (c as u8 - b'0') % 2 == 1 {
                Side::Left
            } else {
                Side::Right
            }
        }
        _ => Side::Midline,
    }
}

/// Unit-RMS noise with a 1/f power spectrum.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = fs / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        if bin == 0 {
            *v = Complex64::new(0.0, 0.0);
        } else {
            *v /= (bin as f64 * df).max(0.5).sqrt();
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.into_iter().map(|v| v / rms).collect()
    } else {
        out
    }
}

/// 1 inside the middle 60% of a trial, 0 outside, with short cosine ramps.
fn erd_window(t: usize, samples: usize) -> f64 {
    let x = t as f64 / samples as f64;
    let (start, end, ramp) = (0.2, 0.8, 0.05);
    if x < start || x > end {
        0.0
    } else if x < start + ramp {
        0.5 - 0.5 * (PI * (x - start) / ramp).cos()
    } else if x > end - ramp {
        0.5 - 0.5 * (PI * (end - x) / ramp).cos()
    } else {
        1.0
    }
}

fn generate_subject(spec: &CohortSpec, index: usize) -> Result<RawRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let mut planner = FftPlanner::new();

    let c = spec.montage.len();
    let t = spec.samples;
    let trials = spec.trials_per_subject;
    let n = trials * t;
    let fs = spec.sampling_rate_hz;
    let jitter = spec.subject_jitter;

    let mut labels: Vec<usize> = (0..trials).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);

    let mu_freq = rng.random_range(9.0..12.0);
    let mu_gain = 1.0 + jitter * rng.random_range(-0.3..0.3);
    let slow_freq = rng.random_range(1.0..4.0);
    let affected = if rng.random_bool(0.5) { Side::Left } else { Side::Right };

    let sides: Vec<Side> = spec.montage.iter().map(|l| side_of(l)).collect();
    let is_roi: Vec<bool> = spec
        .montage
        .iter()
        .map(|l| LEFT_ROI.contains(&l.as_str()) || RIGHT_ROI.contains(&l.as_str()) || MIDDLE_ROI.contains(&l.as_str()))
        .collect();

    let mut sources = Array2::<f64>::zeros((c, n));
    for ch in 0..c {
        let bg = pink_noise(&mut rng, n, fs, &mut planner);
        sources.row_mut(ch).iter_mut().zip(bg).for_each(|(s, v)| *s = BACKGROUND_UV * v);
    }

    for (trial, &label) in labels.iter().enumerate() {
        let contra = if label == 0 { Side::Right } else { Side::Left };
        let phase = rng.random_range(0.0..2.0 * PI);
        let slow_phase = rng.random_range(0.0..2.0 * PI);
        let trial_amp = (0.2 * rng.sample::<f64, _>(StandardNormal)).exp();
        let channel_phase: Vec<f64> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
        for ch in 0..c {
            let mu_here = if is_roi[ch] { 1.0 } else { 0.3 };
            let erd_here = sides[ch] == contra && is_roi[ch];
            for j in 0..t {
                let time = j as f64 / fs;
                let mut mu = MU_UV
                    * mu_gain
                    * trial_amp
                    * mu_here
                    * (2.0 * PI * mu_freq * time + phase + channel_phase[ch]).sin();
                if erd_here {
                    mu *= 1.0 - spec.erd_depth * erd_window(j, t);
                }
                let mut v = mu;
                if sides[ch] == affected {
                    v += SLOW_UV
                        * spec.slow_wave_gain
                        * (2.0 * PI * slow_freq * time + slow_phase).sin();
                }
                sources[[ch, trial * t + j]] += v;
            }
        }
    }

    // per-subject channel gains and weak cross-channel mixing
    let mut mixing = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        for k in 0..c {
            mixing[[i, k]] = if i == k {
                1.0 + jitter * rng.random_range(-1.0..1.0)
            } else {
                jitter * 0.1 * rng.sample::<f64, _>(StandardNormal) / (c as f64).sqrt()
            };
        }
    }
    let data = mixing.dot(&sources);

    RawRecording::new(
        format!("S{:02}", index + 1),
        spec.montage.clone(),
        fs,
        data,
        (0..trials).map(|i| i * t).collect(),
        Some(labels),
    )
}

/// One continuous recording per subject, trials laid end to end.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<RawRecording>> {
    spec.validate()?;
    (0..spec.subject_count).map(|i| generate_subject(spec, i)).collect()
}

/// Generates and epochs a cohort into one labeled source-domain set per subject.
pub fn generate_trial_sets(spec: &CohortSpec) -> Result<Vec<TrialSet>> {
    generate_cohort(spec)?
        .iter()
        .map(|rec| Ok(epoch(rec, spec.samples, 2, Domain::Source)?.set))
        .collect()
}
