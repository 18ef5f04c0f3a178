//! Leave-one-subject-out evaluation, metrics, significance tests, noise and ablations.

pub mod ablation;
pub mod loso;
pub mod metrics;
pub mod noise;
pub mod report;
pub mod wilcoxon;

pub use ablation::{parse_variants, run_ablation, AblationReport, Variant};
pub use loso::{
    evaluate_under_noise, fold_seed, loso_split, predict_labels, run_fold, run_loso, with_pool, Fold, FoldRun,
};
pub use metrics::{compute_metrics, confusion_matrix, mean_std, metrics_from_confusion, FoldResult};
pub use noise::{inject_noise, NoiseKind, NoiseSpec};
pub use report::{
    fold_dir, format_table, read_fold_csv, summarize, write_fold_artifacts, write_fold_csv, write_noise_csv,
    write_summary_json, NoiseRow, PairwiseTest, Summary, TaggedFold, VariantSummary,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
