//! Dense numeric kernels with hand-written backward passes.
//!
//! Sequences are row-major `rows x cols` slices (`rows` = tokens or time,
//! `cols` = features) unless a function says otherwise.

pub(crate) mod tensor;

pub use tensor::{Parameters, Tensor};

use rand::Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// x * sigmoid(x)
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// ln(1 + e^x), evaluated without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(sum(exp(logits)))
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

/// `y[r, o] = sum_i w[o, i] x[r, i] + b[o]`, with `w` of shape `out x in`.
pub fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * inp);
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let wo = &w.data[o * inp..(o + 1) * inp];
            yr[o] = b.data[o] + dot(wo, xr);
        }
    }
    y
}

/// Backward of [`linear`]: accumulates into `gw`/`gb` and returns `dx`.
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    dy: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Vec<f64> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    let mut dx = vec![0.0; rows * inp];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            gb.data[o] += g;
            let wo = &w.data[o * inp..(o + 1) * inp];
            let gwo = &mut gw.data[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gwo[i] += g * xr[i];
                dxr[i] += g * wo[i];
            }
        }
    }
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached statistics of a per-row layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes every row to zero mean / unit variance, then applies gain and bias.
pub fn layer_norm(
    x: &[f64],
    rows: usize,
    gain: &Tensor,
    bias: &Tensor,
) -> (Vec<f64>, LayerNormCache) {
    let cols = gain.len();
    let mut normalized = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let n = (xr[c] - mean) * is;
            normalized[r * cols + c] = n;
            y[r * cols + c] = gain.data[c] * n + bias.data[c];
        }
    }
    (y, LayerNormCache { normalized, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    rows: usize,
    gain: &Tensor,
    dy: &[f64],
    g_gain: &mut Tensor,
    g_bias: &mut Tensor,
) -> Vec<f64> {
    let cols = gain.len();
    let mut dx = vec![0.0; rows * cols];
    let mut dn = vec![0.0; cols];
    for r in 0..rows {
        let nr = &cache.normalized[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        for c in 0..cols {
            g_gain.data[c] += dyr[c] * nr[c];
            g_bias.data[c] += dyr[c];
            dn[c] = dyr[c] * gain.data[c];
        }
        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        let is = cache.inv_std[r];
        for c in 0..cols {
            dx[r * cols + c] = is * (dn[c] - mean_dn - nr[c] * mean_dn_n);
        }
    }
    dx
}

/// Padding rule for a 1-D convolution along the row axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output row `r` is centred on input row `r` (left pad `(k-1)/2`).
    Same,
    /// Output row `r` sees input rows `r-k+1..=r`.
    Causal,
}

impl Padding {
    fn left(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Causal => k - 1,
        }
    }
}

/// Depthwise convolution along rows with zero padding.
///
/// `w` is `cols x k`, `b` is `cols`.
pub fn depthwise_conv(x: &[f64], rows: usize, w: &Tensor, b: &Tensor, pad: Padding) -> Vec<f64> {
    let (cols, k) = (w.shape[0], w.shape[1]);
    let left = pad.left(k) as isize;
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = b.data[c];
            for j in 0..k {
                let src = r as isize + j as isize - left;
                if src >= 0 && (src as usize) < rows {
                    acc += w.data[c * k + j] * x[src as usize * cols + c];
                }
            }
            y[r * cols + c] = acc;
        }
    }
    y
}

pub fn depthwise_conv_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    dy: &[f64],
    pad: Padding,
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Vec<f64> {
    let (cols, k) = (w.shape[0], w.shape[1]);
    let left = pad.left(k) as isize;
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let g = dy[r * cols + c];
            gb.data[c] += g;
            for j in 0..k {
                let src = r as isize + j as isize - left;
                if src >= 0 && (src as usize) < rows {
                    let si = src as usize * cols + c;
                    gw.data[c * k + j] += g * x[si];
                    dx[si] += g * w.data[c * k + j];
                }
            }
        }
    }
    dx
}
