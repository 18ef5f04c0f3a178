//! Fast built-in oracle checks, run by `patcnet selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{metrics_from_confusion, wilcoxon_signed_rank};
use crate::model::{
    backward, cross_entropy, decompose_rhythmic, forward, ssm_scan, EncoderConfig, ModelConfig, ModelParams,
    PrsmConfig, ScanParams,
};
use crate::nn::Parameters;
use crate::pgtc::{build_templates, calibrate, Gate};
use crate::train::Checkpoint;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn decomposition(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l = rng.random_range(3..48);
        let d = rng.random_range(1..12);
        let z: Vec<f64> = (0..l * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (lo, hi) = decompose_rhythmic(&z, l, d, 5.min(2 * l - 1))?;
        for i in 0..z.len() {
            worst = worst.max((lo[i] + hi[i] - z[i]).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max reconstruction error {worst:.2e}")))
}

fn scan(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (l, di, n) = (rng.random_range(1..32), rng.random_range(1..6), rng.random_range(1..6));
        let p = ScanParams::init(di, n, rng);
        let u: Vec<f64> = (0..l * di).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (o, _) = ssm_scan(&u, l, &p)?;
        let mut h = vec![vec![0.0; n]; di];
        for t in 0..l {
            let x = &u[t * di..(t + 1) * di];
            for ch in 0..di {
                let pre: f64 = p.delta_bias.data[ch] + (0..di).map(|j| p.delta.data[ch * di + j] * x[j]).sum::<f64>();
                let dt = (1.0 + pre.exp()).ln();
                let mut y = p.skip.data[ch] * x[ch];
                for k in 0..n {
                    let b: f64 = p.b_bias.data[k] + (0..di).map(|j| p.b_proj.data[k * di + j] * x[j]).sum::<f64>();
                    let c: f64 = p.c_bias.data[k] + (0..di).map(|j| p.c_proj.data[k * di + j] * x[j]).sum::<f64>();
                    let a = -p.a_log.data[ch * n + k].exp();
                    h[ch][k] = (dt * a).exp() * h[ch][k] + dt * b * x[ch];
                    y += c * h[ch][k];
                }
                let got = o[t * di + ch];
                worst = worst.max((got - y).abs() / y.abs().max(1e-8));
            }
        }
    }
    Ok((worst <= 1e-9, format!("max relative deviation {worst:.2e}")))
}

fn gradient() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            temporal_kernel_sizes: vec![5, 3],
            filters_per_branch: 2,
            spatial_multiplier: 2,
            pooling_size: 4,
            embedding_dim: 4,
        },
        prsm: PrsmConfig {
            depth: 1,
            inner_dim: Some(4),
            state_order: 3,
            slow_kernels: vec![3],
            fast_kernels: vec![3],
            lowpass_window: 3,
            pre_kernel: 2,
            rhythm_context: true,
        },
    };
    let (c, t) = (3, 24);
    let params = ModelParams::init(&cfg, c, 2, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..c * t).map(|_| rng.random_range(-2.0..2.0)).collect();
    let loss = |p: &ModelParams| -> Result<f64> { Ok(cross_entropy(&forward(&cfg, p, &x, c, t)?.logits, 1).0) };

    let fwd = forward(&cfg, &params, &x, c, t)?;
    let (_, dl) = cross_entropy(&fwd.logits, 1);
    let mut grads = params.zeros_like();
    backward(&cfg, &params, &fwd, &dl, &mut grads);
    let analytic = grads.flatten();
    let count = analytic.len();

    let h = 1e-5;
    let mut ok = 0;
    let mut checked = 0;
    for idx in (0..count).step_by(3) {
        let mut plus = params.clone();
        let mut minus = params.clone();
        nudge(&mut plus, idx, h);
        nudge(&mut minus, idx, -h);
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        let err = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-6);
        checked += 1;
        if err <= 1e-3 {
            ok += 1;
        }
    }
    let frac = ok as f64 / checked as f64;
    Ok((frac >= 0.99, format!("{ok}/{checked} sampled parameters within 1e-3")))
}

fn nudge(p: &mut ModelParams, flat: usize, by: f64) {
    let mut offset = 0;
    for (_, t) in p.named_tensors_mut() {
        if flat < offset + t.data.len() {
            t.data[flat - offset] += by;
            return;
        }
        offset += t.data.len();
    }
}

fn pgtc(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut violations = 0;
    for _ in 0..100 {
        let dim = 8;
        let n = rng.random_range(4..20);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let feats: Vec<Vec<f64>> = (0..n).map(|_| unit(rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let tmpl = build_templates(&feats, &labels, 2, rng.random_range(0.0..0.9))?;
        for t in &tmpl.templates {
            if (t.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > 1e-6 {
                violations += 1;
            }
        }
        let m = 10;
        let probs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let a = rng.random_range(0.0..1.0);
                vec![a, 1.0 - a]
            })
            .collect();
        let roi: Vec<Vec<f64>> = (0..m).map(|_| unit(rng)).collect();
        let lo = calibrate(&probs, &roi, &tmpl, 0.55, Gate::Joint)?;
        let hi = calibrate(&probs, &roi, &tmpl, 0.8, Gate::Joint)?;
        for (a, b) in lo.iter().zip(&hi) {
            if b.accepted && !a.accepted {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations")))
}

fn metrics() -> Result<(bool, String)> {
    let r = metrics_from_confusion("s", vec![vec![15, 5], vec![5, 15]]);
    let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6])?;
    let passed = r.kappa == 0.5 && r.accuracy == 0.75 && (w.p_value - 0.03125).abs() < 1e-12;
    Ok((passed, format!("kappa {} accuracy {} wilcoxon p {}", r.kappa, r.accuracy, w.p_value)))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let model = ModelConfig::default();
    let params = ModelParams::init(&model, 12, 2, 3)?;
    let ck = Checkpoint {
        model: model.clone(),
        train: Default::default(),
        epoch: 1,
        seed: 3,
        channels: 12,
        class_count: 2,
        params,
        diagnostics: Vec::new(),
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes()?, std::path::Path::new("<memory>"))?;
    let same = back.params.flatten() == ck.params.flatten();
    Ok((same, format!("{} parameters", ck.params.parameter_count())))
}

pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    vec![
        check("decomposition reconstruction", || decomposition(&mut rng)),
        check("scan recursion oracle", || scan(&mut rng)),
        check("model gradient vs finite differences", gradient),
        check("calibration monotone in tau", || pgtc(&mut rng)),
        check("metric and wilcoxon values", metrics),
        check("checkpoint round trip", checkpoint_round_trip),
    ]
}
