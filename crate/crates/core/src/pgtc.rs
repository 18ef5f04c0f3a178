//! ROI template calibration of target pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{EpochedTrial, TrialSet};
use crate::synth::{LEFT_ROI, MIDDLE_ROI, RIGHT_ROI};

pub const DELTA_CAP: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    /// Points per ROI sequence after resampling.
    pub bins: usize,
    /// Power-envelope smoothing window in seconds.
    pub envelope_s: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig { bins: 32, envelope_s: 0.1 }
    }
}

/// Row indices of the left, middle and right ROI electrodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiIndex {
    left: Vec<usize>,
    middle: Vec<usize>,
    right: Vec<usize>,
}

impl RoiIndex {
    pub fn new(montage: &[String]) -> Result<Self> {
        let mut missing = Vec::new();
        let mut find = |names: &[&str]| -> Vec<usize> {
            names
                .iter()
                .filter_map(|n| {
                    let pos = montage.iter().position(|m| m == n);
                    if pos.is_none() {
                        missing.push(n.to_string());
                    }
                    pos
                })
                .collect()
        };
        let (left, middle, right) = (find(&LEFT_ROI), find(&MIDDLE_ROI), find(&RIGHT_ROI));
        if !missing.is_empty() {
            return Err(Error::Montage(missing));
        }
        Ok(RoiIndex { left, middle, right })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub vector: Vec<f64>,
    pub trial: usize,
}

/// Mean over rows, squared, smoothed by a centered moving average, then bin-averaged.
fn roi_sequence(trial: &EpochedTrial, rows: &[usize], window: usize, bins: usize) -> Vec<f64> {
    let t = trial.data.ncols();
    let mean: Vec<f64> = (0..t)
        .map(|j| rows.iter().map(|&r| trial.data[[r, j]] as f64).sum::<f64>() / rows.len() as f64)
        .collect();
    let power: Vec<f64> = mean.iter().map(|v| v * v).collect();

    let mut prefix = vec![0.0; t + 1];
    for j in 0..t {
        prefix[j + 1] = prefix[j] + power[j];
    }
    let half = window / 2;
    let env: Vec<f64> = (0..t)
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + window - half).min(t);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();

    (0..bins)
        .map(|b| {
            let lo = b * t / bins;
            let hi = ((b + 1) * t / bins).max(lo + 1);
            env[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// `normalize([L, R, |L - R|, M])` from ROI power envelopes.
pub fn roi_features(
    trial: &EpochedTrial,
    index: &RoiIndex,
    sampling_rate_hz: f64,
    cfg: &RoiConfig,
) -> Result<Vec<f64>> {
    let t = trial.data.ncols();
    if cfg.bins == 0 || t < cfg.bins {
        return Err(Error::Data(format!(
            "trial of {t} samples too short for {} ROI bins",
            cfg.bins
        )));
    }
    let window = ((cfg.envelope_s * sampling_rate_hz).round() as usize).max(1);
    let l = roi_sequence(trial, &index.left, window, cfg.bins);
    let r = roi_sequence(trial, &index.right, window, cfg.bins);
    let m = roi_sequence(trial, &index.middle, window, cfg.bins);
    let b: Vec<f64> = l.iter().zip(&r).map(|(a, b)| (a - b).abs()).collect();
    let mut v: Vec<f64> = l.into_iter().chain(r).chain(b).chain(m).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Data(format!(
            "ROI feature of subject {} has zero or non-finite norm",
            trial.subject_id
        )));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Features for every trial of a set, in order.
pub fn roi_features_for_set(set: &TrialSet, cfg: &RoiConfig) -> Result<Vec<RoiFeature>> {
    let index = RoiIndex::new(&set.montage)?;
    set.trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(RoiFeature {
                vector: roi_features(t, &index, set.sampling_rate_hz, cfg)?,
                trial: i,
            })
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTemplateSet {
    pub templates: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub delta_min: f64,
    /// Similarity of every training sample to its own class template.
    pub class_sims: Vec<Vec<f64>>,
}

impl RoiTemplateSet {
    pub fn class_count(&self) -> usize {
        self.templates.len()
    }
}

/// Class prototypes and thresholds `clamp(max(delta_min, mean - std), <= 0.99)`.
pub fn build_templates(
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    delta_min: f64,
) -> Result<RoiTemplateSet> {
    if features.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map_or(0, |f| f.len());
    let mut templates = Vec::with_capacity(class_count);
    let mut thresholds = Vec::with_capacity(class_count);
    let mut class_sims = Vec::with_capacity(class_count);
    for k in 0..class_count {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == k)
            .map(|(f, _)| f)
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!("class {k} has no labeled source trials")));
        }
        let mut mean = vec![0.0; dim];
        for f in &members {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Data(format!("class {k} template has zero norm")));
        }
        mean.iter_mut().for_each(|v| *v /= norm);

        let sims: Vec<f64> = members.iter().map(|f| cosine(f, &mean)).collect();
        let delta = if members.len() == 1 {
            delta_min
        } else {
            let mu = sims.iter().sum::<f64>() / n;
            let var = sims.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
            (mu - var.sqrt()).max(delta_min).min(DELTA_CAP)
        };
        templates.push(mean);
        thresholds.push(delta);
        class_sims.push(sims);
    }
    Ok(RoiTemplateSet {
        templates,
        thresholds,
        delta_min,
        class_sims,
    })
}

/// Templates from the labeled trials of a source set.
pub fn build_templates_from_set(source: &TrialSet, cfg: &RoiConfig, delta_min: f64) -> Result<RoiTemplateSet> {
    let feats = roi_features_for_set(source, cfg)?;
    let mut labels = Vec::with_capacity(feats.len());
    for (i, t) in source.trials.iter().enumerate() {
        labels.push(t.label.ok_or_else(|| Error::Data(format!("source trial {i} is unlabeled")))?);
    }
    let vectors: Vec<Vec<f64>> = feats.into_iter().map(|f| f.vector).collect();
    build_templates(&vectors, &labels, source.class_count, delta_min)
}

/// Which gates decide pseudo-label acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// Confidence and ROI similarity.
    Joint,
    ConfidenceOnly,
    /// Every trial is accepted with its argmax label.
    AcceptAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelState {
    pub probs: Vec<f64>,
    pub candidate: usize,
    pub roi_similarity: f64,
    pub accepted: bool,
    /// One-hot of `candidate` when accepted, zeros otherwise.
    pub calibrated: Vec<f64>,
}

impl PseudoLabelState {
    pub fn label(&self) -> Option<usize> {
        self.accepted.then_some(self.candidate)
    }
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn check_tau(tau_p: f64, class_count: usize) -> Result<()> {
    let floor = 1.0 / class_count as f64;
    if !(tau_p > floor && tau_p < 1.0) {
        return Err(Error::Config(format!(
            "tau_p {tau_p} outside ({floor}, 1) for {class_count} classes"
        )));
    }
    Ok(())
}

pub fn calibrate(
    probs: &[Vec<f64>],
    roi: &[Vec<f64>],
    templates: &RoiTemplateSet,
    tau_p: f64,
    gate: Gate,
) -> Result<Vec<PseudoLabelState>> {
    let k = templates.class_count();
    check_tau(tau_p, k)?;
    if probs.len() != roi.len() {
        return Err(Error::Data(format!(
            "{} probability vectors but {} ROI features",
            probs.len(),
            roi.len()
        )));
    }
    probs
        .iter()
        .zip(roi)
        .map(|(p, r)| {
            if p.len() != k {
                return Err(Error::Shape(format!("probability vector of length {} for {k} classes", p.len())));
            }
            let candidate = argmax(p);
            let sim = cosine(r, &templates.templates[candidate]);
            let confident = p[candidate] > tau_p;
            let plausible = sim > templates.thresholds[candidate];
            let accepted = match gate {
                Gate::Joint => confident && plausible,
                Gate::ConfidenceOnly => confident,
                Gate::AcceptAll => true,
            };
            let mut calibrated = vec![0.0; k];
            if accepted {
                calibrated[candidate] = 1.0;
            }
            Ok(PseudoLabelState {
                probs: p.clone(),
                candidate,
                roi_similarity: sim,
                accepted,
                calibrated,
            })
        })
        .collect()
}

/// Recomputes acceptance from scratch with new probabilities.
pub fn refresh(
    states: &[PseudoLabelState],
    new_probs: &[Vec<f64>],
    roi: &[Vec<f64>],
    templates: &RoiTemplateSet,
    tau_p: f64,
    gate: Gate,
) -> Result<Vec<PseudoLabelState>> {
    if states.len() != new_probs.len() {
        return Err(Error::Data(format!(
            "{} states but {} probability vectors",
            states.len(),
            new_probs.len()
        )));
    }
    calibrate(new_probs, roi, templates, tau_p, gate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub accepted: usize,
    pub per_class: Vec<usize>,
    /// Mean ROI similarity over accepted trials (0 when none).
    pub mean_similarity: f64,
}

pub fn acceptance_stats(states: &[PseudoLabelState], class_count: usize) -> AcceptanceStats {
    let mut per_class = vec![0; class_count];
    let mut sim = 0.0;
    for s in states.iter().filter(|s| s.accepted) {
        per_class[s.candidate] += 1;
        sim += s.roi_similarity;
    }
    let accepted = per_class.iter().sum();
    AcceptanceStats {
        accepted,
        per_class,
        mean_similarity: if accepted > 0 { sim / accepted as f64 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Domain;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn montage() -> Vec<String> {
        ["FC3", "C3", "CP3", "FCz", "Cz", "CPz", "FC4", "C4", "CP4"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn trial(data: Array2<f32>) -> EpochedTrial {
        EpochedTrial {
            subject_id: "s".into(),
            data,
            label: Some(0),
            domain: Domain::Source,
        }
    }

    fn random_trial(seed: u64, t: usize) -> EpochedTrial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        trial(Array2::from_shape_fn((9, t), |_| rng.random_range(-1.0..1.0)))
    }

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    #[test]
    fn identical_hemispheres_zero_asymmetry() {
        let mut tr = random_trial(1, 100);
        for j in 0..100 {
            for (l, r) in [(0, 6), (1, 7), (2, 8)] {
                tr.data[[r, j]] = tr.data[[l, j]];
            }
        }
        let idx = RoiIndex::new(&montage()).unwrap();
        let f = roi_features(&tr, &idx, 250.0, &RoiConfig::default()).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f[64..96].iter().all(|&v| v == 0.0));
        assert!((f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_step_by_step_computation() {
        let tr = random_trial(2, 64);
        let cfg = RoiConfig { bins: 8, envelope_s: 0.02 };
        let idx = RoiIndex::new(&montage()).unwrap();
        let f = roi_features(&tr, &idx, 250.0, &cfg).unwrap();
        let window = 5; // round(0.02 * 250)
        let seq = |rows: [usize; 3]| -> Vec<f64> {
            let m: Vec<f64> = (0..64).map(|j| rows.iter().map(|&r| tr.data[[r, j]] as f64).sum::<f64>() / 3.0).collect();
            let p: Vec<f64> = m.iter().map(|v| v * v).collect();
            let env: Vec<f64> = (0..64i64)
                .map(|j| {
                    let vals: Vec<f64> = (j - 2..=j + 2).filter(|&i| (0..64).contains(&i)).map(|i| p[i as usize]).collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect();
            let _ = window;
            (0..8).map(|b| env[b * 8..b * 8 + 8].iter().sum::<f64>() / 8.0).collect()
        };
        let l = seq([0, 1, 2]);
        let m = seq([3, 4, 5]);
        let r = seq([6, 7, 8]);
        let b: Vec<f64> = l.iter().zip(&r).map(|(a, b)| (a - b).abs()).collect();
        let mut want: Vec<f64> = [l, r, b, m].concat();
        let n = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        want.iter_mut().for_each(|v| *v /= n);
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_invariant() {
        let tr = random_trial(3, 200);
        let mut scaled = tr.clone();
        scaled.data.mapv_inplace(|v| v * 37.5);
        let idx = RoiIndex::new(&montage()).unwrap();
        let cfg = RoiConfig::default();
        let a = roi_features(&tr, &idx, 250.0, &cfg).unwrap();
        let b = roi_features(&scaled, &idx, 250.0, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_electrodes_listed() {
        let mut m = montage();
        m.retain(|l| l != "C4" && l != "FC3");
        match RoiIndex::new(&m) {
            Err(Error::Montage(missing)) => assert_eq!(missing, vec!["FC3".to_string(), "C4".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_class_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = unit(&mut rng, 6);
        let b = unit(&mut rng, 6);
        let t = build_templates(&[a.clone(), b.clone(), b.clone()], &[0, 1, 1], 2, 0.5).unwrap();
        assert_eq!(t.templates[0], a);
        assert_eq!(t.thresholds[0], 0.5);
        assert_eq!(t.thresholds[1], DELTA_CAP);
        for (x, y) in t.templates[1].iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(build_templates(&[a], &[0], 2, 0.5), Err(Error::Config(m)) if m.contains("class 1")));
    }

    #[test]
    fn templates_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<Vec<f64>> = (0..40).map(|_| unit(&mut rng, 10)).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let t = build_templates(&feats, &labels, 2, 0.0).unwrap();
        for k in 0..2 {
            let members: Vec<&Vec<f64>> = feats.iter().enumerate().filter(|(i, _)| i % 2 == k).map(|(_, f)| f).collect();
            let mut m = vec![0.0; 10];
            for f in &members {
                for i in 0..10 {
                    m[i] += f[i] / 20.0;
                }
            }
            let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            let m: Vec<f64> = m.iter().map(|v| v / n).collect();
            for (a, b) in t.templates[k].iter().zip(&m) {
                assert!((a - b).abs() < 1e-9);
            }
            let sims: Vec<f64> = members.iter().map(|f| f.iter().zip(&m).map(|(a, b)| a * b).sum()).collect();
            let mu = sims.iter().sum::<f64>() / 20.0;
            let sd = (sims.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / 20.0).sqrt();
            assert!((t.thresholds[k] - (mu - sd).max(0.0).min(DELTA_CAP)).abs() < 1e-9);
        }
    }

    fn simple_templates(delta: f64) -> RoiTemplateSet {
        RoiTemplateSet {
            templates: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            thresholds: vec![delta, delta],
            delta_min: delta,
            class_sims: vec![vec![], vec![]],
        }
    }

    fn roi_with_sim(sim: f64) -> Vec<f64> {
        vec![sim, (1.0 - sim * sim).sqrt()]
    }

    #[test]
    fn calibration_examples() {
        let t = simple_templates(0.5);
        let s = calibrate(&[vec![0.9, 0.1]], &[roi_with_sim(0.8)], &t, 0.6, Gate::Joint).unwrap();
        assert!(s[0].accepted);
        assert_eq!(s[0].calibrated, vec![1.0, 0.0]);
        let s = calibrate(&[vec![0.55, 0.45]], &[roi_with_sim(0.99)], &t, 0.6, Gate::Joint).unwrap();
        assert!(!s[0].accepted);
        assert_eq!(s[0].calibrated, vec![0.0, 0.0]);
        let s = calibrate(&[vec![0.9, 0.1]], &[roi_with_sim(0.4)], &t, 0.6, Gate::Joint).unwrap();
        assert!(!s[0].accepted);
        let s = calibrate(&[vec![0.9, 0.1]], &[roi_with_sim(0.4)], &t, 0.6, Gate::ConfidenceOnly).unwrap();
        assert!(s[0].accepted);
        let s = calibrate(&[vec![0.5, 0.5]], &[roi_with_sim(0.4)], &t, 0.6, Gate::AcceptAll).unwrap();
        assert_eq!(s[0].label(), Some(0));
    }

    #[test]
    fn tau_range_checked() {
        let t = simple_templates(0.5);
        for tau in [0.5, 1.0, 0.2] {
            assert!(matches!(calibrate(&[vec![0.9, 0.1]], &[roi_with_sim(0.8)], &t, tau, Gate::Joint), Err(Error::Config(_))));
        }
    }

    #[test]
    fn refresh_examples() {
        let t = simple_templates(0.5);
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let roi = vec![roi_with_sim(0.9), roi_with_sim(0.1)];
        let s = calibrate(&probs, &roi, &t, 0.6, Gate::Joint).unwrap();
        assert_eq!(refresh(&s, &probs, &roi, &t, 0.6, Gate::Joint).unwrap(), s);
        let uniform = vec![vec![0.5, 0.5]; 2];
        let r = refresh(&s, &uniform, &roi, &t, 0.6, Gate::Joint).unwrap();
        assert_eq!(acceptance_stats(&r, 2).accepted, 0);
        assert!(refresh(&s, &uniform[..1], &roi, &t, 0.6, Gate::Joint).is_err());
    }

    #[test]
    fn refresh_equals_recompute_under_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = simple_templates(0.3);
        let roi: Vec<Vec<f64>> = (0..30).map(|_| roi_with_sim(rng.random_range(0.0..1.0))).collect();
        let mut probs: Vec<Vec<f64>> = (0..30).map(|_| { let a = rng.random_range(0.0..1.0); vec![a, 1.0 - a] }).collect();
        let mut states = calibrate(&probs, &roi, &t, 0.6, Gate::Joint).unwrap();
        for _ in 0..3 {
            for p in probs.iter_mut() {
                let a = (p[0] + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
                *p = vec![a, 1.0 - a];
            }
            states = refresh(&states, &probs, &roi, &t, 0.6, Gate::Joint).unwrap();
            assert_eq!(states, calibrate(&probs, &roi, &t, 0.6, Gate::Joint).unwrap());
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }
}
