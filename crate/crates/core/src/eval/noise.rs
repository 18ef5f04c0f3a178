use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::TrialSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Slow sinusoidal offset per channel.
    Drift,
    /// Biphasic transients at random times.
    Spike,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drift" => Ok(NoiseKind::Drift),
            "spike" => Ok(NoiseKind::Spike),
            other => Err(Error::Config(format!("unknown noise kind {other:?} (expected drift or spike)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Multiple of each channel's RMS.
    pub amplitude: f64,
    pub drift_freq_hz: f64,
    pub spike_rate_per_s: f64,
    pub spike_width_ms: f64,
    pub seed: u64,
    /// Amplitudes swept by `noise-test`.
    pub sweep: Vec<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::Drift,
            amplitude: 1.0,
            drift_freq_hz: 0.3,
            spike_rate_per_s: 1.0,
            spike_width_ms: 40.0,
            seed: 0,
            sweep: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || self.sweep.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("noise amplitudes must be non-negative".into()));
        }
        if !(self.drift_freq_hz > 0.0 && self.spike_rate_per_s >= 0.0 && self.spike_width_ms > 0.0) {
            return Err(Error::Config("noise frequencies, rates and widths must be positive".into()));
        }
        Ok(())
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Corrupted copy of `set`; the input is untouched.
pub fn inject_noise(set: &TrialSet, spec: &NoiseSpec) -> Result<TrialSet> {
    spec.validate()?;
    if spec.amplitude == 0.0 {
        return Ok(set.clone());
    }
    let fs = set.sampling_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = set.clone();
    for trial in &mut out.trials {
        let (c, t) = trial.data.dim();
        let spikes: Vec<usize> = match spec.kind {
            NoiseKind::Drift => Vec::new(),
            NoiseKind::Spike => {
                let count = ((spec.spike_rate_per_s * t as f64 / fs).round() as usize).max(1);
                (0..count).map(|_| rng.random_range(0..t)).collect()
            }
        };
        let width = ((spec.spike_width_ms * 1e-3 * fs).round() as usize).max(2);
        for ch in 0..c {
            let x: Vec<f64> = trial.data.row(ch).iter().map(|&v| v as f64).collect();
            let target = spec.amplitude * rms(&x);
            let added: Vec<f64> = match spec.kind {
                NoiseKind::Drift => {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let raw: Vec<f64> = (0..t)
                        .map(|j| (2.0 * PI * spec.drift_freq_hz * j as f64 / fs + phase).sin())
                        .collect();
                    let r = rms(&raw);
                    raw.into_iter().map(|v| if r > 0.0 { v * target / r } else { 0.0 }).collect()
                }
                NoiseKind::Spike => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let mut v = vec![0.0; t];
                    for &start in &spikes {
                        for k in 0..width.min(t - start) {
                            v[start + k] += sign * target * (2.0 * PI * k as f64 / width as f64).sin();
                        }
                    }
                    v
                }
            };
            for (dst, (xv, a)) in trial.data.row_mut(ch).iter_mut().zip(x.iter().zip(&added)) {
                *dst = (xv + a) as f32;
            }
        }
    }
    Ok(out)
}
