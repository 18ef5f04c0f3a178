use std::collections::BTreeSet;

use log::info;
use rayon::prelude::*;

use super::metrics::{compute_metrics, FoldResult};
use super::noise::{inject_noise, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::{predict_proba, ModelConfig, ModelParams};
use crate::pgtc::argmax;
use crate::signal::{Domain, TrialSet};
use crate::train::{train_fold, EpochLog, TrainConfig, TrainOutcome};

/// One leave-one-subject-out split; labels of the held-out subject live apart.
#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub target_subject: String,
    pub source: TrialSet,
    /// Label-free copy handed to training.
    pub target: TrialSet,
    pub target_labels: Vec<usize>,
}

/// Seed of fold `index`, independent of the other folds.
pub fn fold_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One fold per subject set; every set must hold a single subject.
pub fn loso_split(cohort: &[TrialSet]) -> Result<Vec<Fold>> {
    if cohort.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            cohort.len()
        )));
    }
    let mut ids = Vec::with_capacity(cohort.len());
    let mut seen = BTreeSet::new();
    for (i, set) in cohort.iter().enumerate() {
        let subjects = set.subject_ids();
        let id = match subjects.as_slice() {
            [one] => one.clone(),
            [] => return Err(Error::Data(format!("cohort entry {i} has no trials"))),
            _ => return Err(Error::Data(format!("cohort entry {i} mixes subjects {subjects:?}"))),
        };
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate subject id {id:?}")));
        }
        ids.push(id);
    }

    cohort
        .iter()
        .enumerate()
        .map(|(i, held_out)| {
            let others: Vec<TrialSet> = cohort.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s.clone()).collect();
            let mut source = TrialSet::concat(&others)?;
            for t in &mut source.trials {
                t.domain = Domain::Source;
            }
            let target_labels = held_out
                .trials
                .iter()
                .enumerate()
                .map(|(k, t)| t.label.ok_or_else(|| Error::Data(format!("subject {} trial {k} has no label", ids[i]))))
                .collect::<Result<Vec<_>>>()?;
            let target = TrialSet {
                trials: held_out.trials.iter().map(|t| t.as_unlabeled_target()).collect(),
                ..held_out.clone()
            };
            Ok(Fold {
                index: i,
                target_subject: ids[i].clone(),
                source,
                target,
                target_labels,
            })
        })
        .collect()
}

pub fn predict_labels(cfg: &ModelConfig, params: &ModelParams, set: &TrialSet) -> Result<Vec<usize>> {
    set.trials
        .par_iter()
        .map(|t| Ok(argmax(&predict_proba(cfg, params, t)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub result: FoldResult,
    pub outcome: TrainOutcome,
}

impl FoldRun {
    pub fn log(&self) -> &[EpochLog] {
        &self.outcome.log
    }
}

/// Trains and evaluates one fold with its derived seed.
pub fn run_fold(fold: &Fold, model: &ModelConfig, train: &TrainConfig) -> Result<FoldRun> {
    let cfg = TrainConfig {
        seed: fold_seed(train.seed, fold.index),
        ..train.clone()
    };
    let outcome = train_fold(&fold.source, &fold.target, model, &cfg)?;
    let preds = predict_labels(model, &outcome.checkpoint.params, &fold.target)?;
    let result = compute_metrics(&fold.target_subject, &preds, &fold.target_labels, fold.source.class_count)?;
    info!(
        "fold {} ({}): accuracy {:.3} kappa {:.3}",
        fold.index, fold.target_subject, result.accuracy, result.kappa
    );
    Ok(FoldRun {
        fold: fold.index,
        result,
        outcome,
    })
}

/// Runs every fold on a pool of `jobs` threads (0 = rayon default).
pub fn run_loso(cohort: &[TrialSet], model: &ModelConfig, train: &TrainConfig, jobs: usize) -> Result<Vec<FoldRun>> {
    let folds = loso_split(cohort)?;
    with_pool(jobs, || folds.par_iter().map(|f| run_fold(f, model, train)).collect::<Result<Vec<_>>>())?
}

pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Accuracy of a trained model on a corrupted copy of labeled data.
pub fn evaluate_under_noise(
    cfg: &ModelConfig,
    params: &ModelParams,
    set: &TrialSet,
    spec: &NoiseSpec,
    subject: &str,
) -> Result<FoldResult> {
    let labels: Vec<usize> = set
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| t.label.ok_or_else(|| Error::Data(format!("evaluation trial {i} has no label"))))
        .collect::<Result<_>>()?;
    let noisy = inject_noise(set, spec)?;
    let preds = predict_labels(cfg, params, &noisy)?;
    compute_metrics(subject, &preds, &labels, set.class_count)
}
