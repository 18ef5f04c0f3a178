//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patcnet::eval::{
    format_table, metrics_from_confusion, run_ablation, run_loso, summarize, wilcoxon_signed_rank, write_fold_csv,
    write_summary_json, TaggedFold, Variant,
};
use patcnet::model::{
    backward, cross_entropy, decompose_rhythmic, forward, ssm_scan, EncoderConfig, ModelConfig, ModelParams,
    PrsmConfig, ScanParams,
};
use patcnet::nn::Parameters;
use patcnet::pgtc::{build_templates, calibrate, Gate};
use patcnet::signal::{load_trial_bundle, preprocess_trial_set, save_trial_bundle, PreprocessConfig, TrialSet};
use patcnet::synth::{generate_trial_sets, CohortSpec};
use patcnet::train::{train_fold, write_epoch_csv, Checkpoint, Profile, TrainConfig};

struct Verdict {
    passed: bool,
    /// False when only a reported, non-gating comparison missed.
    gating: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        gating: true,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// 1 ------------------------------------------------------------------------

fn reflect_oracle(i: isize, l: usize) -> usize {
    let n = l as isize;
    if i < 0 {
        (-i) as usize
    } else if i >= n {
        (2 * n - 2 - i) as usize
    } else {
        i as usize
    }
}

fn decomposition() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut recon, mut trend) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let l = rng.random_range(2..=64);
        let d = rng.random_range(1..=16);
        let w = [3usize, 5, 7, 9].into_iter().filter(|&w| w < 2 * l).collect::<Vec<_>>();
        let Some(&w) = w.choose(&mut rng) else { continue };
        let z: Vec<f64> = (0..l * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (lo, hi) = decompose_rhythmic(&z, l, d, w).unwrap();
        for i in 0..l {
            for c in 0..d {
                let idx = i * d + c;
                recon = recon.max((lo[idx] + hi[idx] - z[idx]).abs());
                let half = (w / 2) as isize;
                let avg: f64 = (-half..=half)
                    .map(|o| z[reflect_oracle(i as isize + o, l) * d + c])
                    .sum::<f64>()
                    / w as f64;
                trend = trend.max((avg - lo[idx]).abs());
            }
        }
    }
    let t = start.elapsed();
    verdict(
        recon <= 1e-6 && trend <= 1e-9 && within(t, 5.0),
        format!("max |low+high-z| {recon:.1e} (tol 1e-6), trend oracle {trend:.1e}, {:.2}s (limit 5s)", t.as_secs_f64()),
    )
}

// 2 ------------------------------------------------------------------------

fn naive_scan(u: &[f64], l: usize, p: &ScanParams) -> Vec<f64> {
    let di = p.skip.data.len();
    let n = p.b_bias.data.len();
    let mut h = vec![vec![0.0f64; n]; di];
    let mut out = Vec::with_capacity(l * di);
    for t in 0..l {
        let x = &u[t * di..(t + 1) * di];
        let proj = |w: &[f64], b: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).map(|r| b[r] + (0..di).map(|j| w[r * di + j] * x[j]).sum::<f64>()).collect()
        };
        let delta: Vec<f64> = proj(&p.delta.data, &p.delta_bias.data, di)
            .into_iter()
            .map(|v| if v > 30.0 { v } else { v.exp().ln_1p() })
            .collect();
        let b = proj(&p.b_proj.data, &p.b_bias.data, n);
        let c = proj(&p.c_proj.data, &p.c_bias.data, n);
        for ch in 0..di {
            let mut y = p.skip.data[ch] * x[ch];
            for k in 0..n {
                let a = -p.a_log.data[ch * n + k].exp();
                let a_bar = (delta[ch] * a).exp();
                let b_bar = delta[ch] * b[k];
                h[ch][k] = a_bar * h[ch][k] + b_bar * x[ch];
                y += c[k] * h[ch][k];
            }
            out.push(y);
        }
    }
    out
}

fn scan_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let l = rng.random_range(1..=64);
        let di = rng.random_range(1..=8);
        let n = rng.random_range(1..=8);
        let mut p = ScanParams::init(di, n, &mut rng);
        for v in p.b_bias.data.iter_mut().chain(p.c_bias.data.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        let u: Vec<f64> = (0..l * di).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (got, _) = ssm_scan(&u, l, &p).unwrap();
        for (a, b) in got.iter().zip(naive_scan(&u, l, &p)) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-5 && within(t, 10.0),
        format!("max relative deviation {worst:.1e} (tol 1e-5), {:.2}s (limit 10s)", t.as_secs_f64()),
    )
}

// 3 ------------------------------------------------------------------------

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            temporal_kernel_sizes: vec![9, 7, 5],
            filters_per_branch: 2,
            spatial_multiplier: 2,
            pooling_size: 8,
            embedding_dim: 6,
        },
        prsm: PrsmConfig {
            depth: 1,
            inner_dim: Some(8),
            state_order: 4,
            slow_kernels: vec![5, 9, 13],
            fast_kernels: vec![3, 5, 7],
            lowpass_window: 3,
            pre_kernel: 4,
            rhythm_context: true,
        },
    }
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = tiny_model();
    let (c, t) = (4, 64);
    let params = ModelParams::init(&cfg, c, 2, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..c * t).map(|_| rng.random_range(-2.0..2.0)).collect();
    let target = 1;
    let loss = |p: &ModelParams| cross_entropy(&forward(&cfg, p, &x, c, t).unwrap().logits, target).0;

    let fwd = forward(&cfg, &params, &x, c, t).unwrap();
    let (_, dl) = cross_entropy(&fwd.logits, target);
    let mut grads = params.zeros_like();
    backward(&cfg, &params, &fwd, &dl, &mut grads);

    let h = 1e-5;
    let (mut ok, mut total) = (0usize, 0usize);
    let mut worst_group = String::new();
    let mut worst = 0.0f64;
    let names: Vec<(String, usize)> = params.named_tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let analytic: Vec<Vec<f64>> = grads.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
    for (ti, (name, len)) in names.iter().enumerate() {
        for k in 0..*len {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.named_tensors_mut()[ti].1.data[k] += h;
            minus.named_tensors_mut()[ti].1.data[k] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            total += 1;
            if rel <= 1e-3 {
                ok += 1;
            }
            if rel > worst {
                worst = rel;
                worst_group = name.clone();
            }
        }
    }
    let frac = ok as f64 / total as f64;
    let el = start.elapsed();
    verdict(
        frac >= 0.99 && within(el, 120.0),
        format!(
            "{ok}/{total} parameters within 1e-3 ({:.2}%, need 99%), worst {worst:.1e} in {worst_group}, {:.1}s (limit 120s)",
            100.0 * frac,
            el.as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn pgtc_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut norm_err, mut tau_bad, mut delta_bad, mut argmax_bad) = (0.0f64, 0, 0, 0);
    for _ in 0..1000 {
        let k = rng.random_range(2..=4);
        let dim = rng.random_range(4..=16);
        let n = rng.random_range(k..4 * k + 4);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let d1 = rng.random_range(0.0..0.9);
        let d2 = rng.random_range(d1..0.95);
        let lo_t = build_templates(&feats, &labels, k, d1).unwrap();
        let hi_t = build_templates(&feats, &labels, k, d2).unwrap();
        for tm in &lo_t.templates {
            norm_err = norm_err.max((tm.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        }

        let m = rng.random_range(1..40);
        let probs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let roi: Vec<Vec<f64>> = (0..m).map(|_| random_unit(&mut rng, dim)).collect();
        let floor = 1.0 / k as f64;
        let t1 = rng.random_range(floor + 1e-3..0.98);
        let t2 = rng.random_range(t1..0.99);
        let a = calibrate(&probs, &roi, &lo_t, t1, Gate::Joint).unwrap();
        let b = calibrate(&probs, &roi, &lo_t, t2, Gate::Joint).unwrap();
        let c = calibrate(&probs, &roi, &hi_t, t1, Gate::Joint).unwrap();
        for j in 0..m {
            if b[j].accepted && !a[j].accepted {
                tau_bad += 1;
            }
            if c[j].accepted && !a[j].accepted {
                delta_bad += 1;
            }
            let best = (0..k).fold(0, |bi, i| if probs[j][i] > probs[j][bi] { i } else { bi });
            if a[j].accepted && a[j].label() != Some(best) {
                argmax_bad += 1;
            }
        }
    }

    // one sample in class 1 takes the floor; identical samples hit the cap
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let f: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, 8)).collect();
    let single = build_templates(&f, &[0, 0, 0, 0, 1], 2, 0.37).unwrap();
    let v = random_unit(&mut rng, 8);
    let pairs = [v.clone(), v.clone(), v.clone(), v];
    let same = build_templates(&pairs, &[0, 0, 1, 1], 2, 0.5).unwrap();
    let capped = build_templates(&pairs, &[0, 0, 1, 1], 2, 0.995).unwrap();
    let rules = single.thresholds[1] == 0.37
        && same.thresholds == vec![0.99, 0.99]
        && capped.thresholds == vec![0.99, 0.99];

    verdict(
        norm_err <= 1e-6 && tau_bad == 0 && delta_bad == 0 && argmax_bad == 0 && rules,
        format!(
            "norm error {norm_err:.1e}, tau violations {tau_bad}, delta violations {delta_bad}, argmax violations {argmax_bad}, single/clamp rules {}",
            if rules { "exact" } else { "violated" }
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn brute_metrics(m: &[Vec<usize>]) -> (f64, f64, f64) {
    let k = m.len();
    let mut pairs = Vec::new();
    for (y, row) in m.iter().enumerate() {
        for (p, &cnt) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((y, p), cnt));
        }
    }
    let n = pairs.len() as f64;
    let acc = pairs.iter().filter(|(y, p)| y == p).count() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| {
            let ty = pairs.iter().filter(|(y, _)| *y == c).count() as f64;
            let tp = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
            ty * tp / (n * n)
        })
        .sum();
    let kappa = if (1.0 - pe).abs() == 0.0 { 0.0 } else { (acc - pe) / (1.0 - pe) };
    let f1_of = |c: usize| {
        let tp = pairs.iter().filter(|&&(y, p)| y == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(y, p)| y != c && p == c).count() as f64;
        let fne = pairs.iter().filter(|&&(y, p)| y == c && p != c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 }
    };
    let f1 = if k == 2 { f1_of(1) } else { (0..k).map(f1_of).sum::<f64>() / k as f64 };
    (acc, kappa, f1)
}

fn exact_p_by_enumeration(d: &[f64]) -> f64 {
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].abs().partial_cmp(&d[b].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        for &p in &idx[i..=j] {
            ranks[p] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let w_plus: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let total: f64 = ranks.iter().sum();
    let t = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= t + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let k = if i % 2 == 0 { 2 } else { 3 };
        let m: Vec<Vec<usize>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..15)).collect()).collect();
        if m.iter().flatten().sum::<usize>() == 0 {
            continue;
        }
        let r = metrics_from_confusion("s", m.clone());
        let (acc, kappa, f1) = brute_metrics(&m);
        worst = worst.max((r.accuracy - acc).abs()).max((r.kappa - kappa).abs()).max((r.f1 - f1).abs());
    }
    let fixed = metrics_from_confusion("s", vec![vec![15, 5], vec![5, 15]]);

    let mut p_worst = 0.0f64;
    for n in 5..=12 {
        for _ in 0..5 {
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let v = rng.random_range(1..6) as f64;
                    if rng.random_bool(0.5) { v } else { -v }
                })
                .collect();
            let zeros = vec![0.0; n];
            let got = wilcoxon_signed_rank(&d, &zeros).unwrap();
            p_worst = p_worst.max((got.p_value - exact_p_by_enumeration(&d)).abs());
        }
    }
    let six = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap().p_value;
    let passed = worst <= 1e-9 && fixed.kappa == 0.5 && p_worst <= 1e-12 && six == 0.03125;
    verdict(
        passed,
        format!(
            "metric deviation {worst:.1e} (tol 1e-9), [[15,5],[5,15]] kappa {}, wilcoxon enumeration deviation {p_worst:.1e}, n=6 p {six}",
            fixed.kappa
        ),
    )
}

// 6 ------------------------------------------------------------------------

/// Desk-scale cohort: the ROI electrodes plus three neighbours, 4 s trials.
fn desk_cohort(erd_depth: f64) -> Vec<TrialSet> {
    let montage = ["F3", "F4", "FC3", "FCz", "FC4", "C3", "Cz", "C4", "CP3", "CPz", "CP4", "Pz"];
    let spec = CohortSpec {
        subject_count: 8,
        trials_per_subject: 40,
        montage: montage.iter().map(|s| s.to_string()).collect(),
        samples: 1000,
        sampling_rate_hz: 250.0,
        erd_depth,
        seed: 0,
        ..CohortSpec::default()
    };
    let pre = PreprocessConfig {
        target_hz: 125.0,
        ..PreprocessConfig::default()
    };
    generate_trial_sets(&spec)
        .unwrap()
        .iter()
        .map(|s| preprocess_trial_set(s, &pre).unwrap())
        .collect()
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            temporal_kernel_sizes: vec![16, 12, 8],
            filters_per_branch: 4,
            spatial_multiplier: 2,
            pooling_size: 8,
            embedding_dim: 12,
        },
        prsm: PrsmConfig {
            depth: 1,
            state_order: 8,
            ..PrsmConfig::default()
        },
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 40,
        warmup_epochs: 15,
        ..TrainConfig::preset(Profile::Xw)
    }
}

fn mean_accuracy(cohort: &[TrialSet], variant: Variant) -> (f64, Vec<f64>) {
    let (m, t) = variant.apply(&desk_model(), &desk_train());
    let runs = run_loso(cohort, &m, &t, 0).unwrap();
    let acc: Vec<f64> = runs.iter().map(|r| r.result.accuracy).collect();
    (acc.iter().sum::<f64>() / acc.len() as f64, acc)
}

fn synthetic_loso() -> Verdict {
    let start = Instant::now();
    let cohort = desk_cohort(0.6);
    let (full, full_folds) = mean_accuracy(&cohort, Variant::Full);
    let (source, source_folds) = mean_accuracy(&cohort, Variant::SourceOnly);
    let (chance, _) = mean_accuracy(&desk_cohort(0.0), Variant::Full);
    let el = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    let core = full >= 0.80 && (chance - 0.5).abs() <= 0.08 && within(el, 900.0);
    let mut v = verdict(
        core && full > source,
        format!(
            "full {full:.4} (need >= 0.80) [{}], source_only {source:.4} [{}] (full must be higher), erd_depth 0 full {chance:.4} (need 0.5 +- 0.08), {:.0}s (limit 900s)",
            fmt(&full_folds),
            fmt(&source_folds),
            el.as_secs_f64()
        ),
    );
    // the adaptation margin is reported but only the absolute checks gate the run
    v.gating = !core;
    v
}

// 7 ------------------------------------------------------------------------

fn small_cohort(subjects: usize, trials: usize) -> Vec<TrialSet> {
    let spec = CohortSpec {
        subject_count: subjects,
        trials_per_subject: trials,
        montage: ["FC3", "C3", "CP3", "FCz", "Cz", "CPz", "FC4", "C4", "CP4"].iter().map(|s| s.to_string()).collect(),
        samples: 500,
        sampling_rate_hz: 250.0,
        seed: 7,
        ..CohortSpec::default()
    };
    let pre = PreprocessConfig {
        target_hz: 125.0,
        ..PreprocessConfig::default()
    };
    generate_trial_sets(&spec).unwrap().iter().map(|s| preprocess_trial_set(s, &pre).unwrap()).collect()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            temporal_kernel_sizes: vec![8, 4],
            filters_per_branch: 3,
            spatial_multiplier: 2,
            pooling_size: 8,
            embedding_dim: 6,
        },
        prsm: PrsmConfig {
            depth: 1,
            state_order: 4,
            ..PrsmConfig::default()
        },
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 8,
        warmup_epochs: 3,
        // generous confidence gate so the joint phase sees pseudo-labels
        tau_p: 0.51,
        delta_min: 0.0,
        seed: 99,
        ..TrainConfig::preset(Profile::S2019)
    }
}

fn split(cohort: &[TrialSet]) -> (TrialSet, TrialSet) {
    let source = TrialSet::concat(&cohort[1..]).unwrap();
    let target = TrialSet {
        trials: cohort[0].trials.iter().map(|t| t.as_unlabeled_target()).collect(),
        ..cohort[0].clone()
    };
    (source, target)
}

fn loss_composition() -> Verdict {
    let cohort = small_cohort(4, 16);
    let (source, target) = split(&cohort);
    let cfg = small_train();
    let with = train_fold(&source, &target, &small_model(), &cfg).unwrap();
    let without = train_fold(&source, &target.empty_like(), &small_model(), &cfg).unwrap();

    let mut worst = 0.0f64;
    let mut alpha_ok = true;
    for e in &with.log {
        worst = worst.max((e.total - (e.alpha * e.l_src + (1.0 - e.alpha) * e.l_tgt)).abs());
        let expect = if e.epoch <= cfg.warmup_epochs { 1.0 } else { cfg.alpha };
        alpha_ok &= e.alpha == expect;
    }
    let ew = cfg.warmup_epochs;
    let isolated = with.log[..ew]
        .iter()
        .zip(&without.log[..ew])
        .all(|(a, b)| a.params_sha256 == b.params_sha256 && a.l_src.to_bits() == b.l_src.to_bits());
    let accepted: usize = with.log[ew..].iter().map(|e| e.accepted_count).sum();
    let diverged = with.log.last().unwrap().params_sha256 != without.log.last().unwrap().params_sha256;
    verdict(
        worst <= 1e-9 && alpha_ok && isolated && accepted > 0,
        format!(
            "max |total - (a*src + (1-a)*tgt)| {worst:.1e} (tol 1e-9), warm-up epochs 1..{ew} bit-identical without target: {isolated}, pseudo-labels accepted after warm-up: {accepted}, joint phase uses target: {diverged}"
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn report_bytes(cohort: &[TrialSet], dir: &std::path::Path, tag: &str) -> (Vec<u8>, Vec<u8>, Vec<Vec<u8>>) {
    let cfg = TrainConfig {
        max_epochs: 4,
        warmup_epochs: 2,
        ..small_train()
    };
    let runs = run_loso(cohort, &small_model(), &cfg, 0).unwrap();
    let tagged: Vec<TaggedFold> = runs
        .iter()
        .map(|r| TaggedFold {
            variant: "full".into(),
            fold: r.fold,
            result: r.result.clone(),
        })
        .collect();
    let csv = dir.join(format!("{tag}.csv"));
    let json = dir.join(format!("{tag}.json"));
    write_fold_csv(&tagged, &csv).unwrap();
    write_summary_json(&summarize(&tagged), &json).unwrap();
    let mut cks = Vec::new();
    for r in &runs {
        cks.push(r.outcome.checkpoint.to_bytes().unwrap());
        let log = dir.join(format!("{tag}_{}.csv", r.fold));
        write_epoch_csv(&r.outcome.log, 2, &log).unwrap();
        cks.push(std::fs::read(log).unwrap());
    }
    (std::fs::read(csv).unwrap(), std::fs::read(json).unwrap(), cks)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(3, 8);
    let a = report_bytes(&cohort, dir.path(), "a");
    let b = report_bytes(&cohort, dir.path(), "b");
    let reruns = a == b;

    let set = TrialSet::concat(&cohort).unwrap();
    save_trial_bundle(&set, dir.path().join("bundle")).unwrap();
    let bundle_ok = load_trial_bundle(dir.path().join("bundle")).unwrap() == set;

    let ck = {
        let (source, target) = split(&cohort);
        train_fold(&source, &target, &small_model(), &TrainConfig { max_epochs: 3, warmup_epochs: 1, ..small_train() })
            .unwrap()
            .checkpoint
    };
    let path = dir.path().join("model.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bits = |c: &Checkpoint| c.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ck_ok = bits(&back) == bits(&ck) && back.to_bytes().unwrap() == ck.to_bytes().unwrap() && back.model == ck.model;

    verdict(
        reruns && bundle_ok && ck_ok,
        format!("rerun checkpoints, logs and reports identical: {reruns}, bundle round trip exact: {bundle_ok}, checkpoint round trip exact: {ck_ok}"),
    )
}

// 9 ------------------------------------------------------------------------

fn full_protocol() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // stand-in for a user bundle: 30 channels, 1000 samples at 250 Hz after preprocessing
    let spec = CohortSpec {
        subject_count: 3,
        trials_per_subject: 6,
        seed: 9,
        ..CohortSpec::default()
    };
    let raw = TrialSet::concat(&generate_trial_sets(&spec).unwrap()).unwrap();
    save_trial_bundle(&raw, dir.path().join("raw")).unwrap();
    let loaded = load_trial_bundle(dir.path().join("raw")).unwrap();
    let pre = preprocess_trial_set(&loaded, &PreprocessConfig::default()).unwrap();
    let shape = pre.trial_shape();

    let model = ModelConfig::default();
    let train = TrainConfig {
        max_epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::preset(Profile::Xw)
    };
    let report = run_ablation(&pre.split_by_subject(), &Variant::ALL, &model, &train, 0).unwrap();
    write_fold_csv(&report.folds, dir.path().join("folds.csv")).unwrap();
    write_summary_json(&report.summary, dir.path().join("summary.json")).unwrap();
    let table = format_table(&report.summary);
    let rows = report.summary.variants.len();
    let all_folds = report.summary.variants.iter().all(|v| v.folds == 3);
    let names_ok = Variant::ALL.iter().all(|v| table.contains(v.name()));
    verdict(
        shape == Some((30, 1000)) && rows == 6 && all_folds && names_ok,
        format!(
            "input {shape:?}, {rows} variant rows x 3 folds with default architecture and xw profile (2 epochs), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "decomposition exactness", decomposition),
        (2, "scan oracle", scan_oracle),
        (3, "gradient verification", gradient_check),
        (4, "calibration algebra", pgtc_algebra),
        (5, "metric oracles", metric_oracles),
        (6, "synthetic leave-one-subject-out", synthetic_loso),
        (7, "loss composition and warm-up isolation", loss_composition),
        (8, "determinism and round trips", determinism),
        (9, "profiled protocol and ablation report", full_protocol),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut failed, mut gating_failed) = (0, 0);
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = match (v.passed, v.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        if !v.passed {
            failed += 1;
            gating_failed += v.gating as usize;
        }
        println!("criterion {id} {status}: {name}: {}", v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed, {gating_failed} gating");
    }
    if gating_failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
