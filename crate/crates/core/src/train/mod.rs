//! Source warm-up followed by joint training with calibrated target pseudo-labels.

mod checkpoint;
mod optim;

use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use optim::Adam;

use crate::error::{Error, Result};
use crate::model::{backward, cross_entropy, forward_trial, predict_proba, ModelConfig, ModelParams};
use crate::nn::Parameters;
use crate::pgtc::{
    acceptance_stats, build_templates_from_set, calibrate, check_tau, refresh, roi_features_for_set,
    AcceptanceStats, Gate, PseudoLabelState, RoiConfig, RoiTemplateSet,
};
use crate::signal::{EpochedTrial, TrialSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Xw,
    S2019,
    Custom,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xw" => Ok(Profile::Xw),
            "s2019" => Ok(Profile::S2019),
            "custom" => Ok(Profile::Custom),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected xw, s2019 or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau_p: f64,
    pub delta_min: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset_profile: Profile,
    pub batch_size: usize,
    /// Divide the target loss by the accepted count instead of the batch size.
    pub normalize_by_accepted: bool,
    /// When false only the source loss is optimized and no pseudo-labels are drawn.
    pub adaptation: bool,
    pub gate: Gate,
    /// Recompute pseudo-labels after every joint epoch.
    pub dynamic_refresh: bool,
    pub roi: RoiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Profile::Xw)
    }
}

impl TrainConfig {
    pub fn preset(profile: Profile) -> Self {
        let (alpha, delta_min, warmup) = match profile {
            Profile::S2019 => (0.95, 0.45, 10),
            Profile::Xw | Profile::Custom => (0.98, 0.50, 25),
        };
        TrainConfig {
            alpha,
            tau_p: 0.60,
            delta_min,
            warmup_epochs: warmup,
            max_epochs: 200,
            learning_rate: 0.001,
            weight_decay: 0.001,
            seed: 0,
            dataset_profile: profile,
            batch_size: 16,
            normalize_by_accepted: false,
            adaptation: true,
            gate: Gate::Joint,
            dynamic_refresh: true,
            roi: RoiConfig::default(),
        }
    }

    /// Source weight actually applied during joint epochs.
    pub fn effective_alpha(&self) -> f64 {
        if self.adaptation {
            self.alpha
        } else {
            1.0
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.adaptation && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.delta_min) {
            return Err(Error::Config(format!("delta_min {} outside [0, 1)", self.delta_min)));
        }
        check_tau(self.tau_p, class_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Source weight used this epoch (1 during warm-up).
    pub alpha: f64,
    pub l_src: f64,
    pub l_tgt: f64,
    pub total: f64,
    /// Pseudo-labels in force after this epoch.
    pub accepted_count: usize,
    pub accepted_per_class: Vec<usize>,
    /// SHA-256 of the parameters at the end of the epoch.
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub stats: AcceptanceStats,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub templates: Option<RoiTemplateSet>,
    pub states: Vec<PseudoLabelState>,
}

pub fn params_fingerprint(p: &ModelParams) -> String {
    let mut h = Sha256::new();
    for v in p.flatten() {
        h.update((v as f32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Sum of per-trial losses and gradients, reduced in input order.
fn batch_gradient(
    cfg: &ModelConfig,
    p: &ModelParams,
    items: &[(&EpochedTrial, usize)],
) -> Result<(f64, ModelParams)> {
    let parts: Vec<Result<(f64, ModelParams)>> = items
        .par_iter()
        .map(|(trial, label)| {
            let fwd = forward_trial(cfg, p, trial)?;
            let (loss, dl) = cross_entropy(&fwd.logits, *label);
            let mut g = p.zeros_like();
            backward(cfg, p, &fwd, &dl, &mut g);
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = p.zeros_like();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    Ok((total, grads))
}

fn require_label(t: &EpochedTrial, i: usize) -> Result<usize> {
    t.label
        .ok_or_else(|| Error::Data(format!("source trial {i} in batch has no label")))
}

/// Mean cross-entropy over a labeled batch.
pub fn source_loss(cfg: &ModelConfig, p: &ModelParams, batch: &[&EpochedTrial]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let y = require_label(t, i)?;
        sum += cross_entropy(&forward_trial(cfg, p, t)?.logits, y).0;
    }
    Ok(sum / batch.len() as f64)
}

/// `(1/N_t) sum_j 1[accepted_j] CE(model(X_j), label_j)`.
pub fn target_loss(
    cfg: &ModelConfig,
    p: &ModelParams,
    trials: &[&EpochedTrial],
    states: &[&PseudoLabelState],
) -> Result<f64> {
    if trials.len() != states.len() {
        return Err(Error::Data(format!("{} target trials but {} states", trials.len(), states.len())));
    }
    if trials.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (t, s) in trials.iter().zip(states) {
        if let Some(y) = s.label() {
            sum += cross_entropy(&forward_trial(cfg, p, t)?.logits, y).0;
        }
    }
    Ok(sum / trials.len() as f64)
}

fn check_disjoint(source: &TrialSet, target: &TrialSet) -> Result<()> {
    let src: BTreeSet<&str> = source.trials.iter().map(|t| t.subject_id.as_str()).collect();
    let overlap: BTreeSet<String> = target
        .trials
        .iter()
        .map(|t| t.subject_id.as_str())
        .filter(|s| src.contains(s))
        .map(String::from)
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(overlap.into_iter().collect()))
    }
}

fn target_probs(cfg: &ModelConfig, p: &ModelParams, target: &TrialSet) -> Result<Vec<Vec<f64>>> {
    target.trials.par_iter().map(|t| predict_proba(cfg, p, t)).collect()
}

/// Trains one fold. Target labels are never read.
pub fn train_fold(
    source: &TrialSet,
    target: &TrialSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    source.validate()?;
    let k = source.class_count;
    cfg.validate(k)?;
    model_cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("source set is empty".into()));
    }
    check_disjoint(source, target)?;
    let target = TrialSet {
        trials: target.trials.iter().map(|t| t.as_unlabeled_target()).collect(),
        ..target.clone()
    };
    if !target.is_empty() && target.trial_shape() != source.trial_shape() {
        return Err(Error::Shape(format!(
            "target trials {:?} differ from source trials {:?}",
            target.trial_shape(),
            source.trial_shape()
        )));
    }
    let labels: Vec<usize> = source
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| require_label(t, i))
        .collect::<Result<_>>()?;
    let (channels, _) = source.trial_shape().expect("non-empty source");

    let mut params = ModelParams::init(model_cfg, channels, k, cfg.seed)?;
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);
    let mut src_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    src_rng.set_stream(1);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tgt_rng.set_stream(2);

    let adapt = cfg.adaptation && !target.is_empty();
    let mut templates: Option<RoiTemplateSet> = None;
    let mut target_roi: Vec<Vec<f64>> = Vec::new();
    let mut states: Vec<PseudoLabelState> = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut diagnostics = Vec::new();

    let calibrate_now = |params: &ModelParams,
                             templates: &mut Option<RoiTemplateSet>,
                             target_roi: &mut Vec<Vec<f64>>,
                             states: &mut Vec<PseudoLabelState>|
     -> Result<()> {
        if templates.is_none() {
            *templates = Some(build_templates_from_set(source, &cfg.roi, cfg.delta_min)?);
            *target_roi = roi_features_for_set(&target, &cfg.roi)?
                .into_iter()
                .map(|f| f.vector)
                .collect();
        }
        let tmpl = templates.as_ref().expect("templates built above");
        let probs = target_probs(model_cfg, params, &target)?;
        *states = if states.is_empty() {
            calibrate(&probs, target_roi, tmpl, cfg.tau_p, cfg.gate)?
        } else {
            refresh(states, &probs, target_roi, tmpl, cfg.tau_p, cfg.gate)?
        };
        Ok(())
    };

    if adapt && cfg.warmup_epochs == 0 {
        calibrate_now(&params, &mut templates, &mut target_roi, &mut states)?;
    }

    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let phase = if epoch <= cfg.warmup_epochs { Phase::Warmup } else { Phase::Joint };
        let joint = phase == Phase::Joint && adapt;
        let alpha = if joint { cfg.effective_alpha() } else { 1.0 };

        order.shuffle(&mut src_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let nb = batches.len();
        if joint {
            tgt_order.shuffle(&mut tgt_rng);
        }

        let (mut sum_src, mut sum_tgt, mut sum_total) = (0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let items: Vec<(&EpochedTrial, usize)> =
                batch.iter().map(|&i| (&source.trials[i], labels[i])).collect();
            let (ls, mut grads) = batch_gradient(model_cfg, &params, &items)?;
            let l_src = ls / items.len() as f64;
            let mut l_tgt = 0.0;
            if joint {
                grads.scale(alpha / items.len() as f64);
                let slice = &tgt_order[bi * target.len() / nb..(bi + 1) * target.len() / nb];
                let accepted: Vec<(&EpochedTrial, usize)> = slice
                    .iter()
                    .filter_map(|&j| states[j].label().map(|y| (&target.trials[j], y)))
                    .collect();
                let denom = if cfg.normalize_by_accepted { accepted.len() } else { slice.len() };
                if !accepted.is_empty() && denom > 0 {
                    let (lt, gt) = batch_gradient(model_cfg, &params, &accepted)?;
                    l_tgt = lt / denom as f64;
                    grads.add_scaled(&gt, (1.0 - alpha) / denom as f64);
                }
            } else {
                grads.scale(1.0 / items.len() as f64);
            }
            opt.step(&mut params, &grads);
            sum_src += l_src;
            sum_tgt += l_tgt;
            sum_total += alpha * l_src + (1.0 - alpha) * l_tgt;
        }

        if adapt {
            let due = epoch == cfg.warmup_epochs || (joint && cfg.dynamic_refresh);
            if due {
                calibrate_now(&params, &mut templates, &mut target_roi, &mut states)?;
            }
        }
        let stats = acceptance_stats(&states, k);
        if let Some(t) = &templates {
            diagnostics.push(EpochDiagnostics {
                epoch,
                stats: stats.clone(),
                thresholds: t.thresholds.clone(),
            });
        }
        let row = EpochLog {
            epoch,
            phase,
            alpha,
            l_src: sum_src / nb as f64,
            l_tgt: sum_tgt / nb as f64,
            total: sum_total / nb as f64,
            accepted_count: stats.accepted,
            accepted_per_class: stats.per_class,
            params_sha256: params_fingerprint(&params),
        };
        info!(
            "epoch {epoch} {:?}: src {:.4} tgt {:.4} total {:.4} accepted {}",
            phase, row.l_src, row.l_tgt, row.total, row.accepted_count
        );
        log.push(row);
    }

    let checkpoint = Checkpoint {
        model: model_cfg.clone(),
        train: cfg.clone(),
        epoch: cfg.max_epochs,
        seed: cfg.seed,
        channels,
        class_count: k,
        params,
        diagnostics,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        templates,
        states,
    })
}

pub fn write_epoch_csv(log: &[EpochLog], class_count: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["epoch", "phase", "alpha", "l_src", "l_tgt", "total", "accepted_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..class_count).map(|k| format!("accepted_class_{k}")));
    header.push("params_sha256".into());
    w.write_record(&header)?;
    for row in log {
        let mut rec = vec![
            row.epoch.to_string(),
            format!("{:?}", row.phase).to_lowercase(),
            row.alpha.to_string(),
            row.l_src.to_string(),
            row.l_tgt.to_string(),
            row.total.to_string(),
            row.accepted_count.to_string(),
        ];
        rec.extend(row.accepted_per_class.iter().map(|c| c.to_string()));
        rec.push(row.params_sha256.clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
