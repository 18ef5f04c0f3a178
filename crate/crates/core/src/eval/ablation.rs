use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loso::{loso_split, run_fold, with_pool, FoldRun};
use super::report::{summarize, Summary, TaggedFold};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pgtc::Gate;
use crate::signal::TrialSet;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SourceOnly,
    NoPgtc,
    NoRoi,
    NoDynamic,
    NoRhythm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::SourceOnly,
        Variant::NoPgtc,
        Variant::NoRoi,
        Variant::NoDynamic,
        Variant::NoRhythm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SourceOnly => "source_only",
            Variant::NoPgtc => "no_pgtc",
            Variant::NoRoi => "no_roi",
            Variant::NoDynamic => "no_dynamic",
            Variant::NoRhythm => "no_rhythm",
        }
    }

    /// Configuration switches for this variant.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        match self {
            Variant::Full => {}
            Variant::SourceOnly => {
                t.adaptation = false;
                t.alpha = 1.0;
            }
            Variant::NoPgtc => t.gate = Gate::AcceptAll,
            Variant::NoRoi => t.gate = Gate::ConfidenceOnly,
            Variant::NoDynamic => t.dynamic_refresh = false,
            Variant::NoRhythm => m.prsm.rhythm_context = false,
        }
        (m, t)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?} (expected one of {})", known.join(", ")))
            })
    }
}

/// Parses names, dropping repeats with a warning.
pub fn parse_variants<S: AsRef<str>>(names: &[S]) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for n in names {
        let v: Variant = n.as_ref().parse()?;
        if out.contains(&v) {
            warn!("variant {v} listed more than once; ignoring the repeat");
        } else {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub folds: Vec<TaggedFold>,
    pub summary: Summary,
    pub runs: Vec<(Variant, Vec<FoldRun>)>,
}

/// Runs every variant over the same folds with the same per-fold seeds.
pub fn run_ablation(
    cohort: &[TrialSet],
    variants: &[Variant],
    model: &ModelConfig,
    train: &TrainConfig,
    jobs: usize,
) -> Result<AblationReport> {
    let folds = loso_split(cohort)?;
    let mut runs = Vec::new();
    let mut tagged = Vec::new();
    for &v in variants {
        let (m, t) = v.apply(model, train);
        let fold_runs: Vec<FoldRun> = with_pool(jobs, || {
            folds.par_iter().map(|f| run_fold(f, &m, &t)).collect::<Result<Vec<_>>>()
        })??;
        for r in &fold_runs {
            tagged.push(TaggedFold {
                variant: v.name().into(),
                fold: r.fold,
                result: r.result.clone(),
            });
        }
        runs.push((v, fold_runs));
    }
    let summary = summarize(&tagged);
    Ok(AblationReport {
        folds: tagged,
        summary,
        runs,
    })
}
