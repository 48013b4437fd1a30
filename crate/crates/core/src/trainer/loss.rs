use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{PaddedRow, TrainBatch};
use crate::error::{AltError, Result};
use crate::model::{backward, forward_padded, forward_train, ForwardCache, ForwardOutput, Parameters};
use crate::model::ops::log_softmax;
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(p0 ‖ pθ), reference first.
    #[default]
    RefToPolicy,
    /// KL(pθ ‖ p0).
    PolicyToRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            alpha: 0.06,
            kl_direction: KlDirection::RefToPolicy,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("beta", self.beta), ("alpha", self.alpha)] {
            if !x.is_finite() || x < 0.0 {
                return Err(AltError::validation(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        Ok(())
    }
}

/// Batch-mean loss terms. `neg_entropy` is the entropy term as added to the
/// loss, i.e. minus the mean entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub neg_entropy: f64,
    pub tokens: usize,
}

pub fn position_nll(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// KL between the distributions given by two logit vectors.
pub fn position_kl(ref_logits: &[f64], logits: &[f64], direction: KlDirection) -> f64 {
    let (lp0, lp) = (log_softmax(ref_logits), log_softmax(logits));
    let (a, b) = match direction {
        KlDirection::RefToPolicy => (&lp0, &lp),
        KlDirection::PolicyToRef => (&lp, &lp0),
    };
    a.iter()
        .zip(b)
        .map(|(&la, &lb)| if la == f64::NEG_INFINITY { 0.0 } else { la.exp() * (la - lb) })
        .sum()
}

/// Σ p log p, which is minus the entropy.
pub fn position_neg_entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
        .sum()
}

struct RowTerms {
    nll: f64,
    kl: f64,
    neg_entropy: f64,
    tokens: usize,
}

/// (policy logit column, target token, reference logit column) per generation
/// token that has a predecessor. The reference column is `None` where the
/// feedback-free sequence has no predecessor.
fn targets(r: &PaddedRow) -> Vec<(usize, usize, Option<usize>)> {
    let row = &r.row;
    let before = row.context_len + row.prompt_len;
    row.generation()
        .iter()
        .enumerate()
        .filter(|(j, _)| before + j >= 1)
        .map(|(j, &tok)| {
            let col = r.n_pad + before + j - 1;
            let ref_col = (row.prompt_len + j).checked_sub(1);
            (col, tok as usize, ref_col)
        })
        .collect()
}

struct RowWork {
    terms: RowTerms,
    dlogits: Option<Vec<f64>>,
}

/// Terms for one row and, when `want_grad`, d(batch loss)/d(logits) for it.
fn row_terms(
    out: &ForwardOutput,
    ref_out: Option<&ForwardOutput>,
    r: &PaddedRow,
    cfg: &LossConfig,
    batch_size: usize,
    want_grad: bool,
) -> Result<RowWork> {
    let tg = targets(r);
    if tg.is_empty() {
        return Err(AltError::validation("row has no trainable generation position"));
    }
    let v = out.vocab_size;
    let n = tg.len();
    let m = tg.iter().filter(|t| t.2.is_some()).count();
    let w = 1.0 / (batch_size as f64 * n as f64);
    let wk = if m > 0 { 1.0 / (batch_size as f64 * m as f64) } else { 0.0 };
    let mut dl = want_grad.then(|| vec![0.0; out.seq_len * v]);
    let (mut nll, mut kl, mut ne) = (0.0, 0.0, 0.0);

    for &(col, target, ref_col) in &tg {
        let lp = log_softmax(out.row(col));
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        nll -= lp[target];
        let plogp: Vec<f64> = p.iter().zip(&lp).map(|(&pi, &li)| if pi > 0.0 { pi * li } else { 0.0 }).collect();
        let s_ent: f64 = plogp.iter().sum();
        ne += s_ent;

        let mut ref_parts = None;
        if let (Some(ro), Some(rc)) = (ref_out, ref_col) {
            let lp0 = log_softmax(ro.row(rc));
            let p0: Vec<f64> = lp0.iter().map(|l| l.exp()).collect();
            kl += match cfg.kl_direction {
                KlDirection::RefToPolicy => p0
                    .iter()
                    .zip(lp0.iter().zip(&lp))
                    .map(|(&q, (&lq, &l))| if q > 0.0 { q * (lq - l) } else { 0.0 })
                    .sum::<f64>(),
                KlDirection::PolicyToRef => p
                    .iter()
                    .zip(lp.iter().zip(&lp0))
                    .map(|(&q, (&l, &lq))| if q > 0.0 { q * (l - lq) } else { 0.0 })
                    .sum::<f64>(),
            };
            ref_parts = Some((p0, lp0));
        }

        if let Some(dl) = dl.as_mut() {
            let g = &mut dl[col * v..(col + 1) * v];
            for k in 0..v {
                g[k] += w * p[k];
                g[k] += cfg.alpha * w * (plogp[k] - p[k] * s_ent);
            }
            g[target] -= w;
            if let Some((p0, lp0)) = ref_parts.filter(|_| cfg.beta > 0.0) {
                let bw = cfg.beta * wk;
                match cfg.kl_direction {
                    KlDirection::RefToPolicy => {
                        for k in 0..v {
                            g[k] += bw * (p[k] - p0[k]);
                        }
                    }
                    KlDirection::PolicyToRef => {
                        let s: Vec<f64> = lp.iter().zip(&lp0).map(|(a, b)| a - b).collect();
                        let es: f64 = p.iter().zip(&s).map(|(&q, &x)| if q > 0.0 { q * x } else { 0.0 }).sum();
                        for k in 0..v {
                            if p[k] > 0.0 {
                                g[k] += bw * p[k] * (s[k] - es);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(RowWork {
        terms: RowTerms {
            nll: nll / n as f64,
            kl: if m > 0 { kl / m as f64 } else { 0.0 },
            neg_entropy: ne / n as f64,
            tokens: n,
        },
        dlogits: dl,
    })
}

fn reference_output(ref_params: Option<&Parameters>, r: &PaddedRow) -> Result<Option<ForwardOutput>> {
    ref_params
        .map(|rp| forward_padded(rp, r.row.without_feedback(), 0))
        .transpose()
}

fn combine(cfg: &LossConfig, terms: &[RowTerms]) -> LossBreakdown {
    let b = terms.len() as f64;
    let nll = terms.iter().map(|t| t.nll).sum::<f64>() / b;
    let kl = terms.iter().map(|t| t.kl).sum::<f64>() / b;
    let neg_entropy = terms.iter().map(|t| t.neg_entropy).sum::<f64>() / b;
    LossBreakdown {
        loss: nll + cfg.beta * kl + cfg.alpha * neg_entropy,
        nll,
        kl,
        neg_entropy,
        tokens: terms.iter().map(|t| t.tokens).sum(),
    }
}

fn check_finite(i: usize, t: &RowTerms) -> Result<()> {
    if t.nll.is_finite() && t.kl.is_finite() && t.neg_entropy.is_finite() {
        Ok(())
    } else {
        Err(AltError::numeric(
            "loss",
            format!("non-finite loss terms in batch row {i} (nll {}, kl {}, neg_entropy {})", t.nll, t.kl, t.neg_entropy),
        ))
    }
}

/// Loss terms without gradients. The KL term is computed only when
/// `ref_params` is given; otherwise it is reported as 0.
pub fn evaluate_loss(
    params: &Parameters,
    ref_params: Option<&Parameters>,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let terms = batch
        .rows
        .par_iter()
        .map(|r| {
            let out = forward_padded(params, r.attended(), r.n_pad)?;
            let ro = reference_output(ref_params, r)?;
            row_terms(&out, ro.as_ref(), r, cfg, batch.len(), false).map(|w| w.terms)
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, t) in terms.iter().enumerate() {
        check_finite(i, t)?;
    }
    Ok(combine(cfg, &terms))
}

/// Loss and its gradient. Row gradients are computed in parallel and summed
/// in row order. `dropout_seed` enables dropout with a per-row stream.
pub fn loss_and_grads(
    params: &Parameters,
    ref_params: Option<&Parameters>,
    batch: &TrainBatch,
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Parameters)> {
    let results = batch
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<(RowTerms, Parameters)> {
            let mut rng = dropout_seed.map(|s| Rng::new(derive_seed(s, &[i as u64])));
            let (out, cache): (ForwardOutput, ForwardCache) =
                forward_train(params, r.attended(), r.n_pad, rng.as_mut())?;
            let ro = reference_output(ref_params, r)?;
            let work = row_terms(&out, ro.as_ref(), r, cfg, batch.len(), true)?;
            check_finite(i, &work.terms)?;
            let mut g = params.zeros_like();
            backward(params, &cache, work.dlogits.as_deref().unwrap_or(&[]), &mut g);
            Ok((work.terms, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = params.zeros_like();
    let mut terms = Vec::with_capacity(results.len());
    for (t, g) in results {
        grads.add_assign(&g);
        terms.push(t);
    }
    Ok((combine(cfg, &terms), grads))
}

pub fn nll_term(params: &Parameters, batch: &TrainBatch) -> Result<f64> {
    evaluate_loss(params, None, batch, &LossConfig::default()).map(|b| b.nll)
}

pub fn kl_ref_term(params: &Parameters, ref_params: &Parameters, batch: &TrainBatch, direction: KlDirection) -> Result<f64> {
    if params.config != ref_params.config {
        return Err(AltError::validation("policy and reference configs differ"));
    }
    let cfg = LossConfig {
        kl_direction: direction,
        ..LossConfig::default()
    };
    evaluate_loss(params, Some(ref_params), batch, &cfg).map(|b| b.kl)
}

pub fn entropy_term(params: &Parameters, batch: &TrainBatch) -> Result<f64> {
    evaluate_loss(params, None, batch, &LossConfig::default()).map(|b| b.neg_entropy)
}

#[cfg(test)]
pub(crate) fn logit_grads(
    params: &Parameters,
    ref_params: Option<&Parameters>,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Vec<Vec<f64>> {
    batch
        .rows
        .iter()
        .map(|r| {
            let out = forward_padded(params, r.attended(), r.n_pad).unwrap();
            let ro = reference_output(ref_params, r).unwrap();
            row_terms(&out, ro.as_ref(), r, cfg, batch.len(), true).unwrap().dlogits.unwrap()
        })
        .collect()
}
