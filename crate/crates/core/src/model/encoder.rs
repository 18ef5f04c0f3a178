//! Local sensorimotor pattern encoder: multi-scale temporal filters, depthwise
//! spatial maps, pointwise fusion, SiLU and average pooling into tokens.
//!
//! The spatial map is applied before the temporal filters. Both are linear and
//! act on different axes, so the order only changes how the temporal bias
//! enters (`b_t[f] * sum_c W_s[fj, c]`), not the result.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::impl_parameters;
use crate::nn::{fan_in_uniform, silu, silu_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub temporal_kernel_sizes: Vec<usize>,
    pub filters_per_branch: usize,
    pub spatial_multiplier: usize,
    pub pooling_size: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            temporal_kernel_sizes: vec![36, 24, 18],
            filters_per_branch: 10,
            spatial_multiplier: 3,
            pooling_size: 8,
            embedding_dim: 30,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel_sizes.is_empty() || self.temporal_kernel_sizes.contains(&0) {
            return Err(Error::Config("temporal_kernel_sizes must be non-empty and positive".into()));
        }
        if self.filters_per_branch == 0 || self.spatial_multiplier == 0 || self.pooling_size == 0 {
            return Err(Error::Config(
                "filters_per_branch, spatial_multiplier and pooling_size must be at least 1".into(),
            ));
        }
        let d = self.filters_per_branch * self.temporal_kernel_sizes.len();
        if self.embedding_dim != d {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal filters_per_branch x branches = {d}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.temporal_kernel_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn token_count(&self, samples: usize) -> usize {
        samples / self.pooling_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// One `filters_per_branch x k_m` tensor per branch.
    pub temporal: Vec<Tensor>,
    /// `D`
    pub temporal_bias: Tensor,
    /// `mult*D x C`
    pub spatial: Tensor,
    pub spatial_bias: Tensor,
    /// `D x mult*D`
    pub fusion: Tensor,
    pub fusion_bias: Tensor,
}

impl_parameters!(EncoderParams {
    temporal,
    temporal_bias,
    spatial,
    spatial_bias,
    fusion,
    fusion_bias
});

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, channels: usize, rng: &mut R) -> Self {
        let d = cfg.embedding_dim;
        let sd = d * cfg.spatial_multiplier;
        EncoderParams {
            temporal: cfg
                .temporal_kernel_sizes
                .iter()
                .map(|&k| fan_in_uniform(rng, &[cfg.filters_per_branch, k], k))
                .collect(),
            temporal_bias: Tensor::zeros(&[d]),
            spatial: fan_in_uniform(rng, &[sd, channels], channels),
            spatial_bias: Tensor::zeros(&[sd]),
            fusion: fan_in_uniform(rng, &[d, sd], sd),
            fusion_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn channels(&self) -> usize {
        self.spatial.shape[1]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    samples: usize,
    /// Spatially mapped input, `mult*D x T`.
    v: Vec<f64>,
    /// Temporally filtered maps, `mult*D x T`.
    g: Vec<f64>,
    /// Fusion pre-activation, `D x T`.
    e: Vec<f64>,
}

fn kernel_of<'a>(cfg: &EncoderConfig, p: &'a EncoderParams, feature: usize) -> &'a [f64] {
    let fpb = cfg.filters_per_branch;
    let (m, r) = (feature / fpb, feature % fpb);
    let k = cfg.temporal_kernel_sizes[m];
    &p.temporal[m].data[r * k..(r + 1) * k]
}

fn check_input(cfg: &EncoderConfig, p: &EncoderParams, channels: usize, samples: usize) -> Result<()> {
    if channels != p.channels() {
        return Err(Error::Shape(format!(
            "trial has {channels} channels, encoder expects {}",
            p.channels()
        )));
    }
    if cfg.max_kernel() > samples {
        return Err(Error::Config(format!(
            "temporal kernel {} longer than trial ({samples} samples)",
            cfg.max_kernel()
        )));
    }
    if cfg.token_count(samples) == 0 {
        return Err(Error::Config(format!(
            "pooling size {} longer than trial ({samples} samples)",
            cfg.pooling_size
        )));
    }
    Ok(())
}

/// Encodes a `channels x samples` row-major trial into `L x D` tokens.
pub fn encode_tokens(
    x: &[f64],
    channels: usize,
    samples: usize,
    cfg: &EncoderConfig,
    p: &EncoderParams,
) -> Result<(Vec<f64>, EncoderCache)> {
    check_input(cfg, p, channels, samples)?;
    let t = samples;
    let d = cfg.embedding_dim;
    let mult = cfg.spatial_multiplier;
    let sd = d * mult;

    let mut v = vec![0.0; sd * t];
    for fj in 0..sd {
        let w = &p.spatial.data[fj * channels..(fj + 1) * channels];
        let row = &mut v[fj * t..(fj + 1) * t];
        for (c, &wc) in w.iter().enumerate() {
            let xc = &x[c * t..(c + 1) * t];
            for (r, &xv) in row.iter_mut().zip(xc) {
                *r += wc * xv;
            }
        }
    }

    let mut g = vec![0.0; sd * t];
    for fj in 0..sd {
        let f = fj / mult;
        let kern = kernel_of(cfg, p, f);
        let k = kern.len();
        let left = (k - 1) / 2;
        let wsum: f64 = p.spatial.data[fj * channels..(fj + 1) * channels].iter().sum();
        let bias = p.temporal_bias.data[f] * wsum + p.spatial_bias.data[fj];
        let vr = &v[fj * t..(fj + 1) * t];
        let gr = &mut g[fj * t..(fj + 1) * t];
        for (tt, out) in gr.iter_mut().enumerate() {
            let lo = left.saturating_sub(tt);
            let hi = k.min(t + left - tt);
            let mut acc = bias;
            for tau in lo..hi {
                acc += kern[tau] * vr[tt + tau - left];
            }
            *out = acc;
        }
    }

    let mut e = vec![0.0; d * t];
    for o in 0..d {
        let er = &mut e[o * t..(o + 1) * t];
        er.iter_mut().for_each(|v| *v = p.fusion_bias.data[o]);
        for i in 0..sd {
            let w = p.fusion.data[o * sd + i];
            let gr = &g[i * t..(i + 1) * t];
            for (ev, &gv) in er.iter_mut().zip(gr) {
                *ev += w * gv;
            }
        }
    }

    let pool = cfg.pooling_size;
    let l = cfg.token_count(t);
    let mut tokens = vec![0.0; l * d];
    for o in 0..d {
        let er = &e[o * t..(o + 1) * t];
        for li in 0..l {
            let s: f64 = er[li * pool..(li + 1) * pool].iter().map(|&v| silu(v)).sum();
            tokens[li * d + o] = s / pool as f64;
        }
    }
    Ok((tokens, EncoderCache { samples: t, v, g, e }))
}

/// Accumulates parameter gradients into `grads` and returns `d tokens / d x`.
pub fn encode_backward(
    x: &[f64],
    cfg: &EncoderConfig,
    p: &EncoderParams,
    cache: &EncoderCache,
    d_tokens: &[f64],
    grads: &mut EncoderParams,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let t = cache.samples;
    let channels = p.channels();
    let d = cfg.embedding_dim;
    let mult = cfg.spatial_multiplier;
    let sd = d * mult;
    let pool = cfg.pooling_size;
    let l = cfg.token_count(t);

    let mut de = vec![0.0; d * t];
    for o in 0..d {
        for li in 0..l {
            let g = d_tokens[li * d + o] / pool as f64;
            for s in li * pool..(li + 1) * pool {
                de[o * t + s] = g * silu_grad(cache.e[o * t + s]);
            }
        }
    }

    let mut dg = vec![0.0; sd * t];
    for o in 0..d {
        let der = &de[o * t..(o + 1) * t];
        grads.fusion_bias.data[o] += der.iter().sum::<f64>();
        for i in 0..sd {
            let gr = &cache.g[i * t..(i + 1) * t];
            grads.fusion.data[o * sd + i] += der.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            let w = p.fusion.data[o * sd + i];
            for (dgv, &dev) in dg[i * t..(i + 1) * t].iter_mut().zip(der) {
                *dgv += w * dev;
            }
        }
    }

    let fpb = cfg.filters_per_branch;
    let mut dv = vec![0.0; sd * t];
    for fj in 0..sd {
        let f = fj / mult;
        let (m, r) = (f / fpb, f % fpb);
        let k = cfg.temporal_kernel_sizes[m];
        let left = (k - 1) / 2;
        let kern = &p.temporal[m].data[r * k..(r + 1) * k];
        let dgr = &dg[fj * t..(fj + 1) * t];
        let vr = &cache.v[fj * t..(fj + 1) * t];

        let da: f64 = dgr.iter().sum();
        grads.spatial_bias.data[fj] += da;
        let ws = &p.spatial.data[fj * channels..(fj + 1) * channels];
        grads.temporal_bias.data[f] += da * ws.iter().sum::<f64>();
        let bt = p.temporal_bias.data[f];
        for gw in &mut grads.spatial.data[fj * channels..(fj + 1) * channels] {
            *gw += da * bt;
        }

        let dvr = &mut dv[fj * t..(fj + 1) * t];
        let gk = &mut grads.temporal[m].data[r * k..(r + 1) * k];
        for (tt, &gval) in dgr.iter().enumerate() {
            if gval == 0.0 {
                continue;
            }
            let lo = left.saturating_sub(tt);
            let hi = k.min(t + left - tt);
            for tau in lo..hi {
                let s = tt + tau - left;
                gk[tau] += gval * vr[s];
                dvr[s] += gval * kern[tau];
            }
        }
    }

    for fj in 0..sd {
        let dvr = &dv[fj * t..(fj + 1) * t];
        for c in 0..channels {
            let xc = &x[c * t..(c + 1) * t];
            grads.spatial.data[fj * channels + c] += dvr.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    if !want_input_grad {
        return None;
    }
    let mut dx = vec![0.0; channels * t];
    for fj in 0..sd {
        let dvr = &dv[fj * t..(fj + 1) * t];
        for c in 0..channels {
            let w = p.spatial.data[fj * channels + c];
            for (dxv, &g) in dx[c * t..(c + 1) * t].iter_mut().zip(dvr) {
                *dxv += w * g;
            }
        }
    }
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            temporal_kernel_sizes: vec![6, 3],
            filters_per_branch: 3,
            spatial_multiplier: 2,
            pooling_size: 4,
            embedding_dim: 6,
        }
    }

    fn random_params(cfg: &EncoderConfig, c: usize, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::init(cfg, c, &mut rng);
        for (_, t) in p.named_tensors_mut() {
            for v in &mut t.data {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Temporal conv per channel, then spatial depthwise, then fusion, written out directly.
    fn naive(x: &[f64], c: usize, t: usize, cfg: &EncoderConfig, p: &EncoderParams) -> Vec<f64> {
        let d = cfg.embedding_dim;
        let mult = cfg.spatial_multiplier;
        let mut temp = vec![vec![vec![0.0; t]; c]; d];
        for f in 0..d {
            let m = f / cfg.filters_per_branch;
            let r = f % cfg.filters_per_branch;
            let k = cfg.temporal_kernel_sizes[m];
            let left = (k - 1) as isize / 2;
            for ch in 0..c {
                for tt in 0..t {
                    let mut acc = p.temporal_bias.data[f];
                    for tau in 0..k {
                        let s = tt as isize + tau as isize - left;
                        if s >= 0 && (s as usize) < t {
                            acc += p.temporal[m].data[r * k + tau] * x[ch * t + s as usize];
                        }
                    }
                    temp[f][ch][tt] = acc;
                }
            }
        }
        let mut spat = vec![vec![0.0; t]; d * mult];
        for f in 0..d {
            for j in 0..mult {
                let fj = f * mult + j;
                for tt in 0..t {
                    let mut acc = p.spatial_bias.data[fj];
                    for ch in 0..c {
                        acc += p.spatial.data[fj * c + ch] * temp[f][ch][tt];
                    }
                    spat[fj][tt] = acc;
                }
            }
        }
        let l = t / cfg.pooling_size;
        let mut tokens = vec![0.0; l * d];
        for o in 0..d {
            for li in 0..l {
                let mut s = 0.0;
                for q in 0..cfg.pooling_size {
                    let tt = li * cfg.pooling_size + q;
                    let mut e = p.fusion_bias.data[o];
                    for i in 0..d * mult {
                        e += p.fusion.data[o * d * mult + i] * spat[i][tt];
                    }
                    s += e / (1.0 + (-e).exp());
                }
                tokens[li * d + o] = s / cfg.pooling_size as f64;
            }
        }
        tokens
    }

    #[test]
    fn matches_naive_composition() {
        let cfg = tiny();
        let p = random_params(&cfg, 4, 1);
        let x = random_input(4 * 30, 2);
        let (tokens, _) = encode_tokens(&x, 4, 30, &cfg, &p).unwrap();
        let want = naive(&x, 4, 30, &cfg, &p);
        assert_eq!(tokens.len(), 7 * 6);
        for (a, b) in tokens.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, t, l) in [(30, 1000, 125), (63, 1708, 213)] {
            let p = EncoderParams::init(&cfg, c, &mut rng);
            let x = random_input(c * t, 3);
            let (tokens, _) = encode_tokens(&x, c, t, &cfg, &p).unwrap();
            assert_eq!(tokens.len(), l * 30);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_tokens() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(&cfg, 3, &mut rng);
        let (tokens, _) = encode_tokens(&vec![0.0; 3 * 16], 3, 16, &cfg, &p).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(&cfg, 3, &mut rng);
        assert!(matches!(encode_tokens(&[0.0; 8], 2, 4, &cfg, &p), Err(Error::Shape(_))));
        assert!(matches!(encode_tokens(&[0.0; 12], 3, 4, &cfg, &p), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.embedding_dim = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny();
        let (c, t) = (4, 64);
        let p = random_params(&cfg, c, 7);
        let x = random_input(c * t, 8);
        let (tokens, cache) = encode_tokens(&x, c, t, &cfg, &p).unwrap();
        let ones = vec![1.0; tokens.len()];
        let mut grads = p.zeros_like();
        let dx = encode_backward(&x, &cfg, &p, &cache, &ones, &mut grads, true).unwrap();
        let loss = |x: &[f64], p: &EncoderParams| encode_tokens(x, c, t, &cfg, p).unwrap().0.iter().sum::<f64>();
        let h = 1e-5;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-4);

        let mut xp = x.clone();
        for i in (0..x.len()).step_by(7) {
            xp[i] = x[i] + h;
            let up = loss(&xp, &p);
            xp[i] = x[i] - h;
            let down = loss(&xp, &p);
            xp[i] = x[i];
            let n = (up - down) / (2.0 * h);
            assert!(close(dx[i], n), "dx[{i}] {} vs {n}", dx[i]);
        }

        let names: Vec<String> = p.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let analytic = grads.flatten();
        let mut offset = 0;
        for (ti, name) in names.iter().enumerate() {
            let len = p.named_tensors()[ti].1.len();
            for i in 0..len {
                let mut pp = p.clone();
                pp.named_tensors_mut()[ti].1.data[i] += h;
                let up = loss(&x, &pp);
                pp.named_tensors_mut()[ti].1.data[i] -= 2.0 * h;
                let down = loss(&x, &pp);
                let n = (up - down) / (2.0 * h);
                let a = analytic[offset + i];
                assert!(close(a, n), "{name}[{i}] {a} vs {n}");
            }
            offset += len;
        }
    }
}
