use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use patcnet::config::RunConfig;
use patcnet::eval::{
    evaluate_under_noise, fold_dir, format_table, mean_std, parse_variants, read_fold_csv, run_ablation, run_loso,
    summarize, with_pool, write_fold_artifacts, write_fold_csv, write_noise_csv, write_summary_json, NoiseKind,
    NoiseRow, NoiseSpec, TaggedFold, Variant,
};
use patcnet::signal::{load_trial_bundle, preprocess_trial_set, save_trial_bundle, TrialSet};
use patcnet::synth::generate_trial_sets;
use patcnet::train::{Checkpoint, Profile};
use patcnet::Error;

#[derive(Parser)]
#[command(name = "patcnet", version, about = "Cross-subject motor-imagery EEG decoding toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file layered over the profile preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: xw, s2019 or custom.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Input trial bundle directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (falls back to PATCNET_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for training, cohort synthesis and noise injection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort bundle.
    Synth,
    /// Band-pass, resample, re-reference and baseline-correct a bundle.
    Preprocess,
    /// Leave-one-subject-out training with checkpoints and reports.
    TrainLoso,
    /// Run ablation variants over the same folds.
    Ablate {
        /// Variants to run (comma separated or repeated); default all.
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
    },
    /// Evaluate checkpoints on noise-corrupted copies of the data.
    NoiseTest {
        /// Checkpoint file, or a train-loso output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// drift or spike.
        #[arg(long)]
        noise_kind: Option<NoiseKind>,
        /// Single amplitude instead of the configured sweep.
        #[arg(long)]
        noise_amp: Option<f64>,
    },
    /// Aggregate per-fold CSV files into a summary.
    Report {
        /// folds.csv files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.profile)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.cohort.seed = seed;
        cfg.noise.seed = seed;
    }
    if let Some(d) = &common.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(o) = common.out.clone().or_else(|| std::env::var_os("PATCNET_OUT").map(PathBuf::from)) {
        cfg.paths.out = Some(o);
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set PATCNET_OUT".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<TrialSet> {
    let dir = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| Error::Config("no input bundle: pass --data".into()))?;
    // accept the synth output directory as well as the bundle itself
    let nested = dir.join("bundle");
    let dir = if !dir.join("meta.json").exists() && nested.join("meta.json").exists() {
        nested
    } else {
        dir
    };
    let set = load_trial_bundle(&dir)?;
    info!("loaded {} trials from {}", set.len(), dir.display());
    Ok(set)
}

fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = cfg.echo(dir)?;
    info!("resolved configuration written to {}", path.display());
    println!("{}", cfg.to_json()?);
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    echo(cfg, &out)?;
    let sets = generate_trial_sets(&cfg.cohort)?;
    let set = TrialSet::concat(&sets)?;
    save_trial_bundle(&set, out.join("bundle"))?;
    println!("wrote {} trials from {} subjects to {}", set.len(), sets.len(), out.join("bundle").display());
    Ok(())
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let set = load_data(cfg)?;
    let out = out_dir(cfg)?;
    echo(cfg, &out)?;
    let pre = preprocess_trial_set(&set, &cfg.preprocess)?;
    save_trial_bundle(&pre, out.join("bundle"))?;
    println!(
        "preprocessed {} trials to {} Hz, shape {:?}",
        pre.len(),
        pre.sampling_rate_hz,
        pre.trial_shape()
    );
    Ok(())
}

fn train_loso(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let set = load_data(cfg)?;
    let out = out_dir(cfg)?;
    echo(cfg, &out)?;
    let cohort = set.split_by_subject();
    let runs = run_loso(&cohort, &cfg.model(), &cfg.train, jobs)?;
    let mut tagged = Vec::new();
    for r in &runs {
        write_fold_artifacts(r, &fold_dir(&out, r.fold))?;
        tagged.push(TaggedFold {
            variant: "full".into(),
            fold: r.fold,
            result: r.result.clone(),
        });
    }
    write_fold_csv(&tagged, out.join("folds.csv"))?;
    let summary = summarize(&tagged);
    write_summary_json(&summary, out.join("summary.json"))?;
    print!("{}", format_table(&summary));
    Ok(())
}

fn ablate(cfg: &RunConfig, names: &[String], jobs: usize) -> Result<()> {
    let variants = if names.is_empty() {
        Variant::ALL.to_vec()
    } else {
        parse_variants(names)?
    };
    let set = load_data(cfg)?;
    let out = out_dir(cfg)?;
    echo(cfg, &out)?;
    let cohort = set.split_by_subject();
    let report = run_ablation(&cohort, &variants, &cfg.model(), &cfg.train, jobs)?;
    for (v, runs) in &report.runs {
        for r in runs {
            write_fold_artifacts(r, &fold_dir(&out.join(v.name()), r.fold))?;
        }
    }
    write_fold_csv(&report.folds, out.join("folds.csv"))?;
    write_summary_json(&report.summary, out.join("summary.json"))?;
    let table = format_table(&report.summary);
    fs::write(out.join("table.txt"), &table).with_context(|| "writing table.txt")?;
    print!("{table}");
    for t in &report.summary.wilcoxon {
        match t.p_value {
            Some(p) => println!("wilcoxon {} vs {}: p = {p:.4} (n = {})", t.a, t.b, t.pairs),
            None => println!("wilcoxon {} vs {}: not computed (n = {})", t.a, t.b, t.pairs),
        }
    }
    Ok(())
}

/// (subject, checkpoint) pairs; a run directory maps each fold to its held-out subject.
fn checkpoints(path: &Path) -> Result<Vec<(Option<String>, Checkpoint)>> {
    if path.is_dir() {
        let rows = read_fold_csv(path.join("folds.csv"))
            .with_context(|| format!("{} is not a train-loso output directory", path.display()))?;
        rows.iter()
            .map(|r| {
                let ck = Checkpoint::load(fold_dir(path, r.fold).join("checkpoint.bin"))?;
                Ok((Some(r.result.target_subject_id.clone()), ck))
            })
            .collect()
    } else {
        Ok(vec![(None, Checkpoint::load(path)?)])
    }
}

fn noise_test(cfg: &RunConfig, checkpoint: &Path, kind: Option<NoiseKind>, amp: Option<f64>, jobs: usize) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(k) = kind {
        cfg.noise.kind = k;
    }
    if let Some(a) = amp {
        cfg.noise.sweep = vec![a];
    }
    cfg.noise.validate()?;
    let set = load_data(&cfg)?;
    let out = out_dir(&cfg)?;
    echo(&cfg, &out)?;
    let cks = checkpoints(checkpoint)?;
    let by_subject = set.split_by_subject();

    let mut rows = Vec::new();
    let mut tagged = Vec::new();
    for &a in &cfg.noise.sweep {
        let spec = NoiseSpec {
            amplitude: a,
            ..cfg.noise.clone()
        };
        let mut results = Vec::new();
        for (i, (subject, ck)) in cks.iter().enumerate() {
            let targets: Vec<&TrialSet> = match subject {
                Some(s) => by_subject.iter().filter(|t| t.trials[0].subject_id == *s).collect(),
                None => by_subject.iter().collect(),
            };
            if targets.is_empty() {
                warn!("subject {subject:?} is not in the evaluation bundle; skipping");
            }
            for t in targets {
                let id = t.trials[0].subject_id.clone();
                let r = with_pool(jobs, || evaluate_under_noise(&ck.model, &ck.params, t, &spec, &id))??;
                tagged.push(TaggedFold {
                    variant: format!("{}@{a}", kind_name(spec.kind)),
                    fold: i,
                    result: r.clone(),
                });
                results.push(r);
            }
        }
        let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
        let kap: Vec<f64> = results.iter().map(|r| r.kappa).collect();
        let (m, s) = mean_std(&acc);
        println!("{} amplitude {a}: accuracy {m:.4} ± {s:.4}", kind_name(spec.kind));
        rows.push(NoiseRow {
            kind: kind_name(spec.kind).into(),
            amplitude: a,
            accuracy_mean: m,
            accuracy_std: s,
            kappa_mean: mean_std(&kap).0,
        });
    }
    write_noise_csv(&rows, out.join("noise.csv"))?;
    write_fold_csv(&tagged, out.join("noise_folds.csv"))?;
    Ok(())
}

fn kind_name(k: NoiseKind) -> &'static str {
    match k {
        NoiseKind::Drift => "drift",
        NoiseKind::Spike => "spike",
    }
}

fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut folds = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join("folds.csv") } else { p.clone() };
        folds.extend(read_fold_csv(&file)?);
    }
    if folds.is_empty() {
        return Err(Error::Data("no fold rows found in the given inputs".into()).into());
    }
    let summary = summarize(&folds);
    print!("{}", format_table(&summary));
    if let Some(out) = &cfg.paths.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_summary_json(&summary, out.join("summary.json"))?;
        write_fold_csv(&folds, out.join("folds.csv"))?;
    }
    Ok(())
}

fn selftest() -> Result<bool> {
    let checks = patcnet::selftest::run();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let Some(command) = cli.command else {
        eprintln!("{}", <Cli as clap::CommandFactory>::command().render_help());
        return Ok(ExitCode::from(1));
    };
    let common = &cli.common;
    let cfg = resolve(common)?;
    match command {
        Command::Synth => synth(&cfg)?,
        Command::Preprocess => preprocess(&cfg)?,
        Command::TrainLoso => train_loso(&cfg, common.jobs)?,
        Command::Ablate { variant } => ablate(&cfg, &variant, common.jobs)?,
        Command::NoiseTest {
            checkpoint,
            noise_kind,
            noise_amp,
        } => noise_test(&cfg, &checkpoint, noise_kind, noise_amp, common.jobs)?,
        Command::Report { inputs } => report(&cfg, &inputs)?,
        Command::Selftest => {
            if !selftest()? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation))
                || e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
