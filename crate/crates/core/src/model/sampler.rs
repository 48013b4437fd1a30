//! Autoregressive sampling (nucleus or greedy) and sequence scoring.

use serde::{Deserialize, Serialize};

use super::decode::DecodeState;
use super::ops::{log_softmax, softmax};
use super::{forward, Parameters};
use crate::error::{AltError, Result};
use crate::rng::Rng;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Eos is suppressed until this many tokens have been generated.
    #[serde(default)]
    pub min_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 20,
            min_new_tokens: 0,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_new_tokens > self.max_new_tokens {
            return Err(AltError::validation("min_new_tokens exceeds max_new_tokens"));
        }
        if self.greedy {
            return Ok(());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(AltError::validation("temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(AltError::validation("top_p must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutput {
    /// Generated tokens, including the final eos when one was emitted.
    pub tokens: Vec<TokenId>,
    /// No eos within the token budget.
    pub truncated: bool,
}

/// Smallest prefix of the probability-sorted vocabulary whose cumulative mass
/// reaches `top_p`, renormalized. Ties keep ascending token order.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut support = Vec::new();
    let mut mass = 0.0;
    for idx in order {
        if probs[idx] <= 0.0 && !support.is_empty() {
            break;
        }
        support.push((idx, probs[idx]));
        mass += probs[idx];
        if top_p < 1.0 && mass >= top_p {
            break;
        }
    }
    for (_, p) in support.iter_mut() {
        *p /= mass;
    }
    support
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn draw(logits: &[f64], cfg: &SamplerConfig, rng: &mut Rng) -> TokenId {
    if cfg.greedy {
        return argmax(logits) as TokenId;
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
    let support = nucleus_support(&softmax(&scaled), cfg.top_p);
    let u = rng.unit();
    let mut cum = 0.0;
    for &(idx, p) in &support {
        cum += p;
        if u < cum {
            return idx as TokenId;
        }
    }
    support.last().map(|&(i, _)| i as TokenId).unwrap_or(0)
}

fn context_or_start(prefix: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    // An empty context is represented by a lone eos (document boundary).
    if prefix.is_empty() {
        vec![eos]
    } else {
        prefix.to_vec()
    }
}

fn prefill(params: &Parameters, prefix: &[TokenId]) -> Result<(DecodeState, Vec<f64>)> {
    let mut state = DecodeState::new(params);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = state.step(params, t)?;
    }
    Ok((state, logits))
}

fn continue_from(
    params: &Parameters,
    mut state: DecodeState,
    mut logits: Vec<f64>,
    cfg: &SamplerConfig,
    eos: TokenId,
) -> Result<SampleOutput> {
    let mut rng = Rng::new(cfg.seed);
    let mut tokens = Vec::new();
    while tokens.len() < cfg.max_new_tokens {
        if tokens.len() < cfg.min_new_tokens {
            logits[eos as usize] = f64::NEG_INFINITY;
        }
        let tok = draw(&logits, cfg, &mut rng);
        tokens.push(tok);
        if tok == eos {
            return Ok(SampleOutput {
                tokens,
                truncated: false,
            });
        }
        if state.len() + 1 >= params.config.max_seq_len || tokens.len() == cfg.max_new_tokens {
            break;
        }
        logits = state.step(params, tok)?;
    }
    Ok(SampleOutput {
        tokens,
        truncated: true,
    })
}

/// Sample a continuation of `prefix`. Stops after eos, after `max_new_tokens`
/// tokens or when prefix plus continuation fill `max_seq_len`; fully
/// determined by `(params, prefix, cfg)`.
pub fn sample(params: &Parameters, prefix: &[TokenId], cfg: &SamplerConfig, eos: TokenId) -> Result<SampleOutput> {
    cfg.validate()?;
    let ctx = context_or_start(prefix, eos);
    let (state, logits) = prefill(params, &ctx)?;
    continue_from(params, state, logits, cfg, eos)
}

/// One sample per seed from a shared prefix; the prefix is processed once.
pub fn sample_many(
    params: &Parameters,
    prefix: &[TokenId],
    cfg: &SamplerConfig,
    seeds: &[u64],
    eos: TokenId,
) -> Result<Vec<SampleOutput>> {
    cfg.validate()?;
    let ctx = context_or_start(prefix, eos);
    let (state, logits) = prefill(params, &ctx)?;
    seeds
        .iter()
        .map(|&s| continue_from(params, state.clone(), logits.clone(), &cfg.with_seed(s), eos))
        .collect()
}

/// `log p(continuation[t] | context, continuation[..t])` for each `t`.
pub fn sequence_logprob(
    params: &Parameters,
    context: &[TokenId],
    continuation: &[TokenId],
    eos: TokenId,
) -> Result<Vec<f64>> {
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = context_or_start(context, eos);
    let mut seq = ctx.clone();
    seq.extend_from_slice(continuation);
    let out = forward(params, &seq[..seq.len() - 1])?;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(t, &tok)| log_softmax(out.row(ctx.len() - 1 + t))[tok as usize])
        .collect())
}
