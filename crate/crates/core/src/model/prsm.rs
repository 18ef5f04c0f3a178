//! Rhythmic state block: slow/fast token decomposition, rhythmic context,
//! context-modulated input and residual branches, and a selective scan.
//!
//! All sequences are row-major `L x width` slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::impl_parameters;
use crate::nn::{
    depthwise_conv, depthwise_conv_backward, fan_in_uniform, layer_norm, layer_norm_backward,
    linear, linear_backward, sigmoid, silu, silu_grad, softplus, softplus_inv, LayerNormCache,
    Padding, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrsmConfig {
    pub depth: usize,
    /// Internal width `D_i`; `None` means twice the embedding width.
    pub inner_dim: Option<usize>,
    pub state_order: usize,
    pub slow_kernels: Vec<usize>,
    pub fast_kernels: Vec<usize>,
    pub lowpass_window: usize,
    /// Width of the causal depthwise convolution ahead of the scan.
    pub pre_kernel: usize,
    /// When false the rhythmic context is replaced by zeros.
    pub rhythm_context: bool,
}

impl Default for PrsmConfig {
    fn default() -> Self {
        PrsmConfig {
            depth: 2,
            inner_dim: None,
            state_order: 16,
            slow_kernels: vec![5, 9, 13],
            fast_kernels: vec![3, 5, 7],
            lowpass_window: 5,
            pre_kernel: 4,
            rhythm_context: true,
        }
    }
}

impl PrsmConfig {
    pub fn inner(&self, d: usize) -> usize {
        self.inner_dim.unwrap_or(2 * d)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("prsm depth must be at least 1".into()));
        }
        if self.inner(d) < d {
            return Err(Error::Config(format!("inner_dim {} below embedding width {d}", self.inner(d))));
        }
        if self.state_order == 0 || self.pre_kernel == 0 {
            return Err(Error::Config("state_order and pre_kernel must be positive".into()));
        }
        if self.lowpass_window < 3 || self.lowpass_window % 2 == 0 {
            return Err(Error::Config(format!(
                "lowpass_window {} must be odd and at least 3",
                self.lowpass_window
            )));
        }
        for k in self.slow_kernels.iter().chain(&self.fast_kernels) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("context kernel {k} must be odd")));
            }
        }
        if self.slow_kernels.is_empty() || self.fast_kernels.is_empty() {
            return Err(Error::Config("slow_kernels and fast_kernels must be non-empty".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// decomposition

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_window(w: usize, l: usize) -> Result<()> {
    if w >= 2 * l {
        return Err(Error::Config(format!(
            "lowpass window {w} too long for {l} tokens (needs w < 2L)"
        )));
    }
    Ok(())
}

/// Centered moving average along tokens with reflect padding (edge not repeated).
pub fn moving_average(z: &[f64], l: usize, d: usize, w: usize) -> Result<Vec<f64>> {
    check_window(w, l)?;
    let half = (w / 2) as isize;
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for off in -half..=half {
            let src = reflect(i as isize + off, l);
            for c in 0..d {
                out[i * d + c] += z[src * d + c];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= w as f64);
    Ok(out)
}

fn moving_average_adjoint(g: &[f64], l: usize, d: usize, w: usize) -> Vec<f64> {
    let half = (w / 2) as isize;
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for off in -half..=half {
            let src = reflect(i as isize + off, l);
            for c in 0..d {
                out[src * d + c] += g[i * d + c] / w as f64;
            }
        }
    }
    out
}

/// Splits a normalized token sequence into its moving-average trend and the remainder.
pub fn decompose_rhythmic(z_norm: &[f64], l: usize, d: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let low = moving_average(z_norm, l, d, w)?;
    let high = z_norm.iter().zip(&low).map(|(a, b)| a - b).collect();
    Ok((low, high))
}

// ---------------------------------------------------------------------------
// rhythmic context

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// One `D x k` depthwise kernel per scale.
    pub kernels: Vec<Tensor>,
    pub kernel_bias: Vec<Tensor>,
    /// `D x scales*D`
    pub proj: Tensor,
    pub proj_bias: Tensor,
}

impl_parameters!(BranchParams { kernels, kernel_bias, proj, proj_bias });

impl BranchParams {
    fn init<R: Rng + ?Sized>(d: usize, ks: &[usize], rng: &mut R) -> Self {
        BranchParams {
            kernels: ks.iter().map(|&k| fan_in_uniform(rng, &[d, k], k)).collect(),
            kernel_bias: ks.iter().map(|_| Tensor::zeros(&[d])).collect(),
            proj: fan_in_uniform(rng, &[d, ks.len() * d], ks.len() * d),
            proj_bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    pub slow: BranchParams,
    pub fast: BranchParams,
    /// `D x 2D` fusion of the two branch outputs.
    pub fuse: Tensor,
    pub fuse_bias: Tensor,
}

impl_parameters!(ContextParams { slow, fast, fuse, fuse_bias });

impl ContextParams {
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &PrsmConfig, rng: &mut R) -> Self {
        ContextParams {
            slow: BranchParams::init(d, &cfg.slow_kernels, rng),
            fast: BranchParams::init(d, &cfg.fast_kernels, rng),
            fuse: fan_in_uniform(rng, &[d, 2 * d], 2 * d),
            fuse_bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone)]
struct BranchCache {
    input: Vec<f64>,
    cat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ContextCache {
    slow: BranchCache,
    fast: BranchCache,
    /// `[F_low, F_high]` per token, `L x 2D`.
    both: Vec<f64>,
}

fn branch_forward(x: &[f64], l: usize, d: usize, p: &BranchParams) -> (Vec<f64>, BranchCache) {
    let s = p.kernels.len();
    let mut cat = vec![0.0; l * s * d];
    for (bi, (w, b)) in p.kernels.iter().zip(&p.kernel_bias).enumerate() {
        let y = depthwise_conv(x, l, w, b, Padding::Same);
        for r in 0..l {
            cat[r * s * d + bi * d..r * s * d + (bi + 1) * d].copy_from_slice(&y[r * d..(r + 1) * d]);
        }
    }
    let out = linear(&cat, l, &p.proj, &p.proj_bias);
    (out, BranchCache { input: x.to_vec(), cat })
}

fn branch_backward(
    c: &BranchCache,
    l: usize,
    d: usize,
    p: &BranchParams,
    dy: &[f64],
    g: &mut BranchParams,
) -> Vec<f64> {
    let s = p.kernels.len();
    let dcat = linear_backward(&c.cat, l, &p.proj, dy, &mut g.proj, &mut g.proj_bias);
    let mut dx = vec![0.0; l * d];
    let mut part = vec![0.0; l * d];
    for bi in 0..s {
        for r in 0..l {
            part[r * d..(r + 1) * d].copy_from_slice(&dcat[r * s * d + bi * d..r * s * d + (bi + 1) * d]);
        }
        let (gk, gb) = (&mut g.kernels[bi], &mut g.kernel_bias[bi]);
        let d_in = depthwise_conv_backward(&c.input, l, &p.kernels[bi], &part, Padding::Same, gk, gb);
        dx.iter_mut().zip(d_in).for_each(|(a, b)| *a += b);
    }
    dx
}

/// `C_r = W_h [F_low, F_high] + b_h + (F_low + F_high) / 2`.
pub fn build_context(
    z_low: &[f64],
    z_high: &[f64],
    l: usize,
    d: usize,
    p: &ContextParams,
) -> Result<(Vec<f64>, ContextCache)> {
    if z_low.len() != l * d || z_high.len() != l * d {
        return Err(Error::Shape(format!(
            "context inputs of length {} and {} do not match {l}x{d}",
            z_low.len(),
            z_high.len()
        )));
    }
    let (f_low, slow) = branch_forward(z_low, l, d, &p.slow);
    let (f_high, fast) = branch_forward(z_high, l, d, &p.fast);
    let mut both = vec![0.0; l * 2 * d];
    for r in 0..l {
        both[r * 2 * d..r * 2 * d + d].copy_from_slice(&f_low[r * d..(r + 1) * d]);
        both[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(&f_high[r * d..(r + 1) * d]);
    }
    let mut c = linear(&both, l, &p.fuse, &p.fuse_bias);
    for (i, v) in c.iter_mut().enumerate() {
        *v += 0.5 * (f_low[i] + f_high[i]);
    }
    Ok((c, ContextCache { slow, fast, both }))
}

/// Returns gradients with respect to `(z_low, z_high)`.
pub fn build_context_backward(
    cache: &ContextCache,
    l: usize,
    d: usize,
    p: &ContextParams,
    dc: &[f64],
    g: &mut ContextParams,
) -> (Vec<f64>, Vec<f64>) {
    let dboth = linear_backward(&cache.both, l, &p.fuse, dc, &mut g.fuse, &mut g.fuse_bias);
    let mut d_flow = vec![0.0; l * d];
    let mut d_fhigh = vec![0.0; l * d];
    for r in 0..l {
        for c in 0..d {
            let half = 0.5 * dc[r * d + c];
            d_flow[r * d + c] = dboth[r * 2 * d + c] + half;
            d_fhigh[r * d + c] = dboth[r * 2 * d + d + c] + half;
        }
    }
    let dl = branch_backward(&cache.slow, l, d, &p.slow, &d_flow, &mut g.slow);
    let dh = branch_backward(&cache.fast, l, d, &p.fast, &d_fhigh, &mut g.fast);
    (dl, dh)
}

// ---------------------------------------------------------------------------
// modulation

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    /// `2 D_i x D`; rows `0..D_i` give `U`, the rest `R`.
    pub in_proj: Tensor,
    pub in_bias: Tensor,
    /// `D_i x D`
    pub scale: Tensor,
    pub scale_bias: Tensor,
    /// `D_i x D`
    pub shift: Tensor,
    pub shift_bias: Tensor,
}

impl_parameters!(ModulationParams { in_proj, in_bias, scale, scale_bias, shift, shift_bias });

impl ModulationParams {
    pub fn init<R: Rng + ?Sized>(d: usize, di: usize, rng: &mut R) -> Self {
        ModulationParams {
            in_proj: fan_in_uniform(rng, &[2 * di, d], d),
            in_bias: Tensor::zeros(&[2 * di]),
            scale: fan_in_uniform(rng, &[di, d], d),
            scale_bias: Tensor::zeros(&[di]),
            shift: fan_in_uniform(rng, &[di, d], d),
            shift_bias: Tensor::zeros(&[di]),
        }
    }

    pub fn inner(&self) -> usize {
        self.scale.shape[0]
    }
}

#[derive(Debug, Clone)]
pub struct ModulationCache {
    z_norm: Vec<f64>,
    context: Vec<f64>,
    u: Vec<f64>,
    s: Vec<f64>,
}

/// Returns `(U_bar, R_bar)`, each `L x D_i`.
pub fn modulate_branches(
    z_norm: &[f64],
    context: &[f64],
    l: usize,
    p: &ModulationParams,
) -> Result<(Vec<f64>, Vec<f64>, ModulationCache)> {
    let d = p.in_proj.shape[1];
    let di = p.inner();
    if p.in_proj.shape[0] != 2 * di || z_norm.len() != l * d || context.len() != l * d {
        return Err(Error::Shape(format!(
            "modulation expects {l}x{d} inputs and a {}x{d} input projection",
            2 * di
        )));
    }
    let ur = linear(z_norm, l, &p.in_proj, &p.in_bias);
    let s_pre = linear(context, l, &p.scale, &p.scale_bias);
    let b = linear(context, l, &p.shift, &p.shift_bias);
    let mut u = vec![0.0; l * di];
    let mut s = vec![0.0; l * di];
    let mut ubar = vec![0.0; l * di];
    let mut rbar = vec![0.0; l * di];
    for r in 0..l {
        for c in 0..di {
            let i = r * di + c;
            u[i] = ur[r * 2 * di + c];
            s[i] = sigmoid(s_pre[i]);
            ubar[i] = u[i] * (1.0 + s[i]);
            rbar[i] = ur[r * 2 * di + di + c] + b[i];
        }
    }
    let cache = ModulationCache {
        z_norm: z_norm.to_vec(),
        context: context.to_vec(),
        u,
        s,
    };
    Ok((ubar, rbar, cache))
}

/// Returns gradients with respect to `(z_norm, context)`.
pub fn modulate_backward(
    cache: &ModulationCache,
    l: usize,
    p: &ModulationParams,
    d_ubar: &[f64],
    d_rbar: &[f64],
    g: &mut ModulationParams,
) -> (Vec<f64>, Vec<f64>) {
    let di = p.inner();
    let mut dur = vec![0.0; l * 2 * di];
    let mut ds_pre = vec![0.0; l * di];
    for r in 0..l {
        for c in 0..di {
            let i = r * di + c;
            let s = cache.s[i];
            dur[r * 2 * di + c] = d_ubar[i] * (1.0 + s);
            dur[r * 2 * di + di + c] = d_rbar[i];
            ds_pre[i] = d_ubar[i] * cache.u[i] * s * (1.0 - s);
        }
    }
    let dz = linear_backward(&cache.z_norm, l, &p.in_proj, &dur, &mut g.in_proj, &mut g.in_bias);
    let mut dc = linear_backward(&cache.context, l, &p.scale, &ds_pre, &mut g.scale, &mut g.scale_bias);
    let dc2 = linear_backward(&cache.context, l, &p.shift, d_rbar, &mut g.shift, &mut g.shift_bias);
    dc.iter_mut().zip(dc2).for_each(|(a, b)| *a += b);
    (dz, dc)
}

// ---------------------------------------------------------------------------
// selective scan

#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    /// `D_i x D_i`
    pub delta: Tensor,
    pub delta_bias: Tensor,
    /// `N x D_i`
    pub b_proj: Tensor,
    pub b_bias: Tensor,
    /// `N x D_i`
    pub c_proj: Tensor,
    pub c_bias: Tensor,
    /// `D_i x N`; the transition is `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `D_i`
    pub skip: Tensor,
}

impl_parameters!(ScanParams { delta, delta_bias, b_proj, b_bias, c_proj, c_bias, a_log, skip });

impl ScanParams {
    pub fn init<R: Rng + ?Sized>(di: usize, n: usize, rng: &mut R) -> Self {
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let delta_bias = (0..di)
            .map(|_| softplus_inv(rng.random_range(lo..hi).exp()))
            .collect();
        let a_log = (0..di * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect();
        ScanParams {
            delta: fan_in_uniform(rng, &[di, di], di),
            delta_bias: Tensor::from_vec(&[di], delta_bias),
            b_proj: fan_in_uniform(rng, &[n, di], di),
            b_bias: Tensor::zeros(&[n]),
            c_proj: fan_in_uniform(rng, &[n, di], di),
            c_bias: Tensor::zeros(&[n]),
            a_log: Tensor::from_vec(&[di, n], a_log),
            skip: Tensor::filled(&[di], 1.0),
        }
    }

    pub fn inner(&self) -> usize {
        self.skip.len()
    }

    pub fn order(&self) -> usize {
        self.b_bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct ScanCache {
    u: Vec<f64>,
    delta_pre: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// States after every step, `L x D_i x N`.
    h: Vec<f64>,
}

/// `h_l = exp(delta_l A) h_{l-1} + delta_l B_l u_l`, `o_l = C_l h_l + skip * u_l`.
pub fn ssm_scan(u: &[f64], l: usize, p: &ScanParams) -> Result<(Vec<f64>, ScanCache)> {
    let di = p.inner();
    let n = p.order();
    if u.len() != l * di {
        return Err(Error::Shape(format!("scan input length {} is not {l}x{di}", u.len())));
    }
    let delta_pre = linear(u, l, &p.delta, &p.delta_bias);
    let delta: Vec<f64> = delta_pre.iter().map(|&x| softplus(x)).collect();
    let b = linear(u, l, &p.b_proj, &p.b_bias);
    let c = linear(u, l, &p.c_proj, &p.c_bias);
    let a: Vec<f64> = p.a_log.data.iter().map(|v| -v.exp()).collect();

    let mut h = vec![0.0; l * di * n];
    let mut o = vec![0.0; l * di];
    let mut state = vec![0.0; di * n];
    for step in 0..l {
        let bl = &b[step * n..(step + 1) * n];
        let cl = &c[step * n..(step + 1) * n];
        for ch in 0..di {
            let dt = delta[step * di + ch];
            let x = u[step * di + ch];
            let row = &mut state[ch * n..(ch + 1) * n];
            let ar = &a[ch * n..(ch + 1) * n];
            let mut acc = p.skip.data[ch] * x;
            for k in 0..n {
                row[k] = (dt * ar[k]).exp() * row[k] + dt * bl[k] * x;
                acc += cl[k] * row[k];
            }
            if !acc.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    position: step,
                    msg: format!("non-finite scan state in channel {ch} (delta {dt})"),
                });
            }
            o[step * di + ch] = acc;
        }
        h[step * di * n..(step + 1) * di * n].copy_from_slice(&state);
    }
    Ok((
        o,
        ScanCache {
            u: u.to_vec(),
            delta_pre,
            delta,
            b,
            c,
            h,
        },
    ))
}

/// Returns the gradient with respect to the scan input.
pub fn ssm_scan_backward(cache: &ScanCache, l: usize, p: &ScanParams, d_o: &[f64], g: &mut ScanParams) -> Vec<f64> {
    let di = p.inner();
    let n = p.order();
    let a: Vec<f64> = p.a_log.data.iter().map(|v| -v.exp()).collect();
    let u = &cache.u;

    let mut du = vec![0.0; l * di];
    let mut d_delta = vec![0.0; l * di];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut da = vec![0.0; di * n];
    let mut carry = vec![0.0; di * n];
    let zeros = vec![0.0; di * n];

    for step in (0..l).rev() {
        let h_now = &cache.h[step * di * n..(step + 1) * di * n];
        let h_prev = if step == 0 {
            &zeros[..]
        } else {
            &cache.h[(step - 1) * di * n..step * di * n]
        };
        let bl = &cache.b[step * n..(step + 1) * n];
        let cl = &cache.c[step * n..(step + 1) * n];
        for ch in 0..di {
            let i = step * di + ch;
            let go = d_o[i];
            let x = u[i];
            let dt = cache.delta[i];
            g.skip.data[ch] += go * x;
            du[i] += go * p.skip.data[ch];
            let mut dd = 0.0;
            let mut dx = 0.0;
            for k in 0..n {
                let j = ch * n + k;
                dc[step * n + k] += go * h_now[j];
                let dh = carry[j] + go * cl[k];
                let abar = (dt * a[j]).exp();
                let d_abar = dh * h_prev[j] * abar;
                carry[j] = dh * abar;
                dd += d_abar * a[j] + dh * bl[k] * x;
                da[j] += d_abar * dt;
                db[step * n + k] += dh * dt * x;
                dx += dh * dt * bl[k];
            }
            d_delta[i] = dd;
            du[i] += dx;
        }
    }

    for (j, v) in da.iter().enumerate() {
        g.a_log.data[j] += v * a[j];
    }
    let d_pre: Vec<f64> = d_delta
        .iter()
        .zip(&cache.delta_pre)
        .map(|(g, &x)| g * sigmoid(x))
        .collect();
    let d1 = linear_backward(u, l, &p.delta, &d_pre, &mut g.delta, &mut g.delta_bias);
    let d2 = linear_backward(u, l, &p.b_proj, &db, &mut g.b_proj, &mut g.b_bias);
    let d3 = linear_backward(u, l, &p.c_proj, &dc, &mut g.c_proj, &mut g.c_bias);
    for i in 0..du.len() {
        du[i] += d1[i] + d2[i] + d3[i];
    }
    du
}

// ---------------------------------------------------------------------------
// full block

#[derive(Debug, Clone, PartialEq)]
pub struct PrsmBlockParams {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub context: ContextParams,
    pub modulation: ModulationParams,
    /// `D_i x k` causal depthwise kernel applied to `U_bar`.
    pub pre_conv: Tensor,
    pub pre_conv_bias: Tensor,
    pub scan: ScanParams,
    /// `D x D_i`
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

impl_parameters!(PrsmBlockParams {
    norm_gain,
    norm_bias,
    context,
    modulation,
    pre_conv,
    pre_conv_bias,
    scan,
    out_proj,
    out_bias
});

impl PrsmBlockParams {
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &PrsmConfig, rng: &mut R) -> Self {
        let di = cfg.inner(d);
        PrsmBlockParams {
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            context: ContextParams::init(d, cfg, rng),
            modulation: ModulationParams::init(d, di, rng),
            pre_conv: fan_in_uniform(rng, &[di, cfg.pre_kernel], cfg.pre_kernel),
            pre_conv_bias: Tensor::zeros(&[di]),
            scan: ScanParams::init(di, cfg.state_order, rng),
            out_proj: fan_in_uniform(rng, &[d, di], di),
            out_bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm: LayerNormCache,
    context: Option<ContextCache>,
    modulation: ModulationCache,
    ubar: Vec<f64>,
    q: Vec<f64>,
    scan: ScanCache,
    o: Vec<f64>,
    rbar: Vec<f64>,
    gated: Vec<f64>,
}

/// One block: `z + W_out(o * silu(R_bar)) + b_out`.
pub fn prsm_block_forward(
    z: &[f64],
    l: usize,
    d: usize,
    cfg: &PrsmConfig,
    p: &PrsmBlockParams,
) -> Result<(Vec<f64>, BlockCache)> {
    if z.len() != l * d {
        return Err(Error::Shape(format!("block input length {} is not {l}x{d}", z.len())));
    }
    let (z_norm, norm) = layer_norm(z, l, &p.norm_gain, &p.norm_bias);
    let (context, ctx_cache) = if cfg.rhythm_context {
        let (low, high) = decompose_rhythmic(&z_norm, l, d, cfg.lowpass_window)?;
        let (c, cache) = build_context(&low, &high, l, d, &p.context)?;
        (c, Some(cache))
    } else {
        (vec![0.0; l * d], None)
    };
    let (ubar, rbar, modulation) = modulate_branches(&z_norm, &context, l, &p.modulation)?;
    let q = depthwise_conv(&ubar, l, &p.pre_conv, &p.pre_conv_bias, Padding::Causal);
    let u: Vec<f64> = q.iter().map(|&v| silu(v)).collect();
    let (o, scan) = ssm_scan(&u, l, &p.scan)?;
    let gated: Vec<f64> = o.iter().zip(&rbar).map(|(o, r)| o * silu(*r)).collect();
    let y = linear(&gated, l, &p.out_proj, &p.out_bias);
    let out = z.iter().zip(&y).map(|(a, b)| a + b).collect();
    Ok((
        out,
        BlockCache {
            norm,
            context: ctx_cache,
            modulation,
            ubar,
            q,
            scan,
            o,
            rbar,
            gated,
        },
    ))
}

/// Returns the gradient with respect to the block input.
pub fn prsm_block_backward(
    cache: &BlockCache,
    l: usize,
    d: usize,
    cfg: &PrsmConfig,
    p: &PrsmBlockParams,
    dy: &[f64],
    g: &mut PrsmBlockParams,
) -> Vec<f64> {
    let d_gated = linear_backward(&cache.gated, l, &p.out_proj, dy, &mut g.out_proj, &mut g.out_bias);
    let mut d_o = vec![0.0; d_gated.len()];
    let mut d_rbar = vec![0.0; d_gated.len()];
    for i in 0..d_gated.len() {
        let r = cache.rbar[i];
        d_o[i] = d_gated[i] * silu(r);
        d_rbar[i] = d_gated[i] * cache.o[i] * silu_grad(r);
    }
    let du = ssm_scan_backward(&cache.scan, l, &p.scan, &d_o, &mut g.scan);
    let dq: Vec<f64> = du.iter().zip(&cache.q).map(|(g, &q)| g * silu_grad(q)).collect();
    let d_ubar = depthwise_conv_backward(
        &cache.ubar,
        l,
        &p.pre_conv,
        &dq,
        Padding::Causal,
        &mut g.pre_conv,
        &mut g.pre_conv_bias,
    );
    let (mut dz_norm, dc) = modulate_backward(&cache.modulation, l, &p.modulation, &d_ubar, &d_rbar, &mut g.modulation);
    if let Some(ctx) = &cache.context {
        let (d_low, d_high) = build_context_backward(ctx, l, d, &p.context, &dc, &mut g.context);
        let diff: Vec<f64> = d_low.iter().zip(&d_high).map(|(a, b)| a - b).collect();
        let back = moving_average_adjoint(&diff, l, d, cfg.lowpass_window);
        for i in 0..dz_norm.len() {
            dz_norm[i] += d_high[i] + back[i];
        }
    }
    let dz = layer_norm_backward(&cache.norm, l, &p.norm_gain, &dz_norm, &mut g.norm_gain, &mut g.norm_bias);
    dz.iter().zip(dy).map(|(a, b)| a + b).collect()
}
