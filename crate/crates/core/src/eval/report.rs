//! Per-fold CSV tables and JSON summaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loso::FoldRun;
use super::metrics::{mean_std, FoldResult};
use super::wilcoxon::wilcoxon_signed_rank;
use crate::error::{Error, Result};
use crate::pgtc::RoiTemplateSet;
use crate::train::{write_epoch_csv, EpochDiagnostics};

/// A fold result tagged with the variant (or run name) that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedFold {
    pub variant: String,
    pub fold: usize,
    pub result: FoldResult,
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldRow {
    variant: String,
    fold: usize,
    target_subject: String,
    accuracy: f64,
    recall: f64,
    precision: f64,
    f1: f64,
    kappa: f64,
    /// Rows separated by `;`, entries by spaces.
    confusion: String,
}

fn encode_confusion(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_confusion(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|row| {
            row.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Data(format!("bad confusion entry {v:?}"))))
                .collect()
        })
        .collect()
}

pub fn write_fold_csv(folds: &[TaggedFold], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for f in folds {
        let r = &f.result;
        w.serialize(FoldRow {
            variant: f.variant.clone(),
            fold: f.fold,
            target_subject: r.target_subject_id.clone(),
            accuracy: r.accuracy,
            recall: r.recall,
            precision: r.precision,
            f1: r.f1,
            kappa: r.kappa,
            confusion: encode_confusion(&r.confusion),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fold_csv(path: impl AsRef<Path>) -> Result<Vec<TaggedFold>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize::<FoldRow>()
        .map(|row| {
            let row = row?;
            Ok(TaggedFold {
                variant: row.variant,
                fold: row.fold,
                result: FoldResult {
                    target_subject_id: row.target_subject,
                    confusion: decode_confusion(&row.confusion)?,
                    accuracy: row.accuracy,
                    recall: row.recall,
                    precision: row.precision,
                    f1: row.f1,
                    kappa: row.kappa,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub folds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub precision_mean: f64,
    pub recall_mean: f64,
}

/// Paired test on per-subject accuracy; `None` when fewer than 5 subjects are shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub pairs: usize,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variants: Vec<VariantSummary>,
    pub wilcoxon: Vec<PairwiseTest>,
}

impl Summary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

/// Variant order follows first appearance in `folds`.
pub fn summarize(folds: &[TaggedFold]) -> Summary {
    let mut names: Vec<String> = Vec::new();
    for f in folds {
        if !names.contains(&f.variant) {
            names.push(f.variant.clone());
        }
    }
    let of = |name: &str| -> Vec<&TaggedFold> { folds.iter().filter(|f| f.variant == name).collect() };

    let variants = names
        .iter()
        .map(|name| {
            let rows = of(name);
            let pick = |g: fn(&FoldResult) -> f64| mean_std(&rows.iter().map(|r| g(&r.result)).collect::<Vec<_>>());
            let (am, asd) = pick(|r| r.accuracy);
            let (km, ksd) = pick(|r| r.kappa);
            let (fm, fsd) = pick(|r| r.f1);
            VariantSummary {
                variant: name.clone(),
                folds: rows.len(),
                accuracy_mean: am,
                accuracy_std: asd,
                kappa_mean: km,
                kappa_std: ksd,
                f1_mean: fm,
                f1_std: fsd,
                precision_mean: pick(|r| r.precision).0,
                recall_mean: pick(|r| r.recall).0,
            }
        })
        .collect();

    let mut wilcoxon = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let ra = of(a);
            let rb = of(b);
            let mut xa = Vec::new();
            let mut xb = Vec::new();
            for fa in &ra {
                if let Some(fb) = rb.iter().find(|f| f.result.target_subject_id == fa.result.target_subject_id) {
                    xa.push(fa.result.accuracy);
                    xb.push(fb.result.accuracy);
                }
            }
            let test = wilcoxon_signed_rank(&xa, &xb).ok();
            wilcoxon.push(PairwiseTest {
                a: a.clone(),
                b: b.clone(),
                pairs: xa.len(),
                statistic: test.as_ref().map(|t| t.statistic),
                p_value: test.map(|t| t.p_value),
            });
        }
    }
    Summary { variants, wilcoxon }
}

pub fn write_summary_json(summary: &Summary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(path, e))
}

/// Plain-text table in the layout of an ablation study.
pub fn format_table(summary: &Summary) -> String {
    let mut s = format!("{:<14} {:>6} {:>16} {:>16} {:>16}\n", "variant", "folds", "accuracy", "kappa", "f1");
    for v in &summary.variants {
        s.push_str(&format!(
            "{:<14} {:>6} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}\n",
            v.variant, v.folds, v.accuracy_mean, v.accuracy_std, v.kappa_mean, v.kappa_std, v.f1_mean, v.f1_std
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub kind: String,
    pub amplitude: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub kappa_mean: f64,
}

pub fn write_noise_csv(rows: &[NoiseRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct FoldDiagnostics<'a> {
    target_subject: &'a str,
    templates: Option<&'a RoiTemplateSet>,
    epochs: &'a [EpochDiagnostics],
}

/// Directory of fold `index` below a run directory.
pub fn fold_dir(run_dir: &Path, index: usize) -> std::path::PathBuf {
    run_dir.join(format!("fold_{index:02}"))
}

/// Writes `checkpoint.bin`, `epochs.csv` and `diagnostics.json` for one fold.
pub fn write_fold_artifacts(run: &FoldRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = &run.outcome.checkpoint;
    ck.save(dir.join("checkpoint.bin"))?;
    write_epoch_csv(&run.outcome.log, ck.class_count, dir.join("epochs.csv"))?;
    let diag = FoldDiagnostics {
        target_subject: &run.result.target_subject_id,
        templates: run.outcome.templates.as_ref(),
        epochs: &ck.diagnostics,
    };
    let path = dir.join("diagnostics.json");
    fs::write(&path, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::io(&path, e))
}
