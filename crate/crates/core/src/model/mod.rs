//! Encoder, stacked rhythmic state blocks and the classification head.

pub mod encoder;
pub mod prsm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::impl_parameters;
use crate::nn::{fan_in_uniform, linear, log_sum_exp, softmax, Parameters, Tensor};
use crate::signal::EpochedTrial;

pub use encoder::{encode_backward, encode_tokens, EncoderCache, EncoderConfig, EncoderParams};
pub use prsm::{
    build_context, decompose_rhythmic, modulate_branches, prsm_block_backward, prsm_block_forward,
    ssm_scan, ssm_scan_backward, BlockCache, PrsmBlockParams, PrsmConfig, ScanParams,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prsm: PrsmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prsm.validate(self.encoder.embedding_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `K x D`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl_parameters!(HeadParams { weight, bias });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub blocks: Vec<PrsmBlockParams>,
    pub head: HeadParams,
}

impl_parameters!(ModelParams { encoder, blocks, head });

impl ModelParams {
    pub fn init(cfg: &ModelConfig, channels: usize, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embedding_dim();
        let mut p = ModelParams {
            encoder: EncoderParams::init(&cfg.encoder, channels, &mut rng),
            blocks: (0..cfg.prsm.depth)
                .map(|_| PrsmBlockParams::init(d, &cfg.prsm, &mut rng))
                .collect(),
            head: HeadParams {
                weight: fan_in_uniform(&mut rng, &[classes, d], d),
                bias: Tensor::zeros(&[classes]),
            },
        };
        p.quantize();
        Ok(p)
    }

    pub fn class_count(&self) -> usize {
        self.head.bias.len()
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels()
    }

    /// Rounds every value to the nearest `f32`, so checkpoints store parameters exactly.
    pub fn quantize(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Temporal mean pool, linear map to logits. Returns `(logits, pooled)`.
pub fn head_logits(z: &[f64], l: usize, d: usize, head: &HeadParams) -> (Vec<f64>, Vec<f64>) {
    let mut pooled = vec![0.0; d];
    for r in 0..l {
        for c in 0..d {
            pooled[c] += z[r * d + c];
        }
    }
    pooled.iter_mut().for_each(|v| *v /= l as f64);
    (linear(&pooled, 1, &head.weight, &head.bias), pooled)
}

/// Class probabilities for a token sequence.
pub fn classify(z: &[f64], l: usize, d: usize, head: &HeadParams) -> Vec<f64> {
    softmax(&head_logits(z, l, d, head).0)
}

/// Cross-entropy of `logits` against a one-hot `target`, and its logit gradient.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Everything a backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    input: Vec<f64>,
    tokens: usize,
    encoder: EncoderCache,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
}

pub fn trial_input(trial: &EpochedTrial) -> Vec<f64> {
    trial.data.iter().map(|&v| v as f64).collect()
}

/// Full forward pass over a `channels x samples` row-major input.
pub fn forward(
    cfg: &ModelConfig,
    p: &ModelParams,
    x: &[f64],
    channels: usize,
    samples: usize,
) -> Result<ForwardPass> {
    let d = cfg.embedding_dim();
    let (mut z, encoder) = encode_tokens(x, channels, samples, &cfg.encoder, &p.encoder)?;
    if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            position: pos / d,
            msg: "non-finite encoder token".into(),
        });
    }
    let l = z.len() / d;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for bp in &p.blocks {
        let (next, cache) = prsm_block_forward(&z, l, d, &cfg.prsm, bp)?;
        z = next;
        blocks.push(cache);
    }
    let (logits, pooled) = head_logits(&z, l, d, &p.head);
    let probs = softmax(&logits);
    Ok(ForwardPass {
        logits,
        probs,
        input: x.to_vec(),
        tokens: l,
        encoder,
        blocks,
        pooled,
    })
}

pub fn forward_trial(cfg: &ModelConfig, p: &ModelParams, trial: &EpochedTrial) -> Result<ForwardPass> {
    forward(cfg, p, &trial_input(trial), trial.data.nrows(), trial.data.ncols())
}

/// Class probabilities for one trial.
pub fn predict_proba(cfg: &ModelConfig, p: &ModelParams, trial: &EpochedTrial) -> Result<Vec<f64>> {
    Ok(forward_trial(cfg, p, trial)?.probs)
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
pub fn backward(cfg: &ModelConfig, p: &ModelParams, fwd: &ForwardPass, d_logits: &[f64], grads: &mut ModelParams) {
    let d = cfg.embedding_dim();
    let l = fwd.tokens;
    let k = p.class_count();
    let mut d_pooled = vec![0.0; d];
    for o in 0..k {
        let g = d_logits[o];
        grads.head.bias.data[o] += g;
        for c in 0..d {
            grads.head.weight.data[o * d + c] += g * fwd.pooled[c];
            d_pooled[c] += g * p.head.weight.data[o * d + c];
        }
    }
    let mut dz = vec![0.0; l * d];
    for r in 0..l {
        for c in 0..d {
            dz[r * d + c] = d_pooled[c] / l as f64;
        }
    }
    for (i, bp) in p.blocks.iter().enumerate().rev() {
        dz = prsm_block_backward(&fwd.blocks[i], l, d, &cfg.prsm, bp, &dz, &mut grads.blocks[i]);
    }
    encode_backward(&fwd.input, &cfg.encoder, &p.encoder, &fwd.encoder, &dz, &mut grads.encoder, false);
}
