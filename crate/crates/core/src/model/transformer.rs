//! Full-sequence forward pass with activation caching, and its backward pass.

use super::ops::{
    accumulate_weight_grad, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_bias,
    matmul_transpose_b,
};
use super::{ModelConfig, Parameters};
use crate::error::{AltError, Result};
use crate::rng::Rng;
use crate::vocab::TokenId;

/// Per-position logits for one sequence, row-major `seq_len x vocab_size`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl ForwardOutput {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}

struct LayerCache {
    ln1_out: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    /// `n_heads x L x L`, zero where masked.
    probs: Vec<f64>,
    attn_concat: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    ln2_out: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
    mlp_drop: Option<Vec<f64>>,
}

/// Activations saved by [`forward_train`] for [`backward`].
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf_out: Vec<f64>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

/// Keys visible to query `i`: causal, and left padding is hidden from every
/// query except itself.
#[inline]
pub(crate) fn visible(i: usize, j: usize, n_pad: usize) -> bool {
    j <= i && (j >= n_pad || j == i)
}

fn check_input(config: &ModelConfig, tokens: &[TokenId], n_pad: usize) -> Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(AltError::validation(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(AltError::validation(format!(
            "token id {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if n_pad > tokens.len() {
        return Err(AltError::validation("padding longer than sequence"));
    }
    Ok(())
}

fn dropout_mask(rng: Option<&mut Rng>, rate: f64, len: usize) -> Option<Vec<f64>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            Some((0..len).map(|_| if rng.unit() < rate { 0.0 } else { keep }).collect())
        }
        _ => None,
    }
}

/// Logits for every position of `tokens`.
pub fn forward(params: &Parameters, tokens: &[TokenId]) -> Result<ForwardOutput> {
    forward_padded(params, tokens, 0)
}

/// Forward pass over a row whose first `n_pad` tokens are left padding. Padding is
/// masked out of attention and position ids start at the first real token, so the
/// logits of real positions equal those of the unpadded row.
pub fn forward_padded(params: &Parameters, tokens: &[TokenId], n_pad: usize) -> Result<ForwardOutput> {
    forward_train(params, tokens, n_pad, None).map(|(out, _)| out)
}

/// Forward pass that keeps the activations needed by [`backward`]. Dropout is
/// applied only when `dropout_rng` is given and the configured rate is positive.
pub fn forward_train(
    params: &Parameters,
    tokens: &[TokenId],
    n_pad: usize,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(ForwardOutput, ForwardCache)> {
    let c = &params.config;
    check_input(c, tokens, n_pad)?;
    let (l, d, v, f) = (tokens.len(), c.d_model, c.vocab_size, c.d_ff);
    let (nh, dh) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let positions: Vec<usize> = (0..l).map(|i| i.saturating_sub(n_pad)).collect();
    let mut x = vec![0.0; l * d];
    for i in 0..l {
        let te = &params.tok_emb[tokens[i] as usize * d..][..d];
        let pe = &params.pos_emb[positions[i] * d..][..d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for lp in &params.layers {
        let (ln1_out, ln1_xhat, ln1_rstd) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias, l, d);
        let qkv = matmul_bias(&ln1_out, &lp.w_qkv, &lp.b_qkv, l, d, 3 * d);

        let mut probs = vec![0.0; nh * l * l];
        let mut attn_concat = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..nh {
            for i in 0..l {
                let q = &qkv[i * 3 * d + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    if visible(i, j, n_pad) {
                        let k = &qkv[j * 3 * d + d + h * dh..][..dh];
                        scores[j] = dot(q, k) * scale;
                        max = max.max(scores[j]);
                    }
                }
                let prow = &mut probs[(h * l + i) * l..][..l];
                let mut sum = 0.0;
                for j in 0..=i {
                    if visible(i, j, n_pad) {
                        prow[j] = (scores[j] - max).exp();
                        sum += prow[j];
                    }
                }
                let out = &mut attn_concat[i * d + h * dh..][..dh];
                for j in 0..=i {
                    if prow[j] != 0.0 {
                        prow[j] /= sum;
                        let vv = &qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        for (o, &val) in out.iter_mut().zip(vv) {
                            *o += prow[j] * val;
                        }
                    }
                }
            }
        }
        let mut attn_out = matmul_bias(&attn_concat, &lp.w_attn_out, &lp.b_attn_out, l, d, d);
        let attn_drop = dropout_mask(dropout_rng.as_deref_mut(), c.dropout, l * d);
        if let Some(m) = &attn_drop {
            attn_out.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
        }
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (ln2_out, ln2_xhat, ln2_rstd) = layer_norm(&x_mid, &lp.ln2_gain, &lp.ln2_bias, l, d);
        let fc_pre = matmul_bias(&ln2_out, &lp.w_fc, &lp.b_fc, l, d, f);
        let fc_act: Vec<f64> = fc_pre.iter().map(|&z| gelu(z)).collect();
        let mut mlp_out = matmul_bias(&fc_act, &lp.w_proj, &lp.b_proj, l, f, d);
        let mlp_drop = dropout_mask(dropout_rng.as_deref_mut(), c.dropout, l * d);
        if let Some(m) = &mlp_drop {
            mlp_out.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
        }
        x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

        layers.push(LayerCache {
            ln1_out,
            ln1_xhat,
            ln1_rstd,
            qkv,
            probs,
            attn_concat,
            attn_drop,
            ln2_out,
            ln2_xhat,
            ln2_rstd,
            fc_pre,
            fc_act,
            mlp_drop,
        });
    }

    let (lnf_out, lnf_xhat, lnf_rstd) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias, l, d);
    let logits = matmul_bias(&lnf_out, &params.w_head, &params.b_head, l, d, v);
    let out = ForwardOutput {
        logits,
        seq_len: l,
        vocab_size: v,
    };
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        positions,
        layers,
        lnf_out,
        lnf_xhat,
        lnf_rstd,
    };
    Ok((out, cache))
}

/// Accumulate into `grads` the gradient of a scalar whose derivative w.r.t. the
/// logits is `dlogits` (`seq_len x vocab_size`).
pub fn backward(params: &Parameters, cache: &ForwardCache, dlogits: &[f64], grads: &mut Parameters) {
    let c = &params.config;
    let (l, d, v, f) = (cache.tokens.len(), c.d_model, c.vocab_size, c.d_ff);
    let (nh, dh) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    if l == 0 {
        return;
    }

    accumulate_weight_grad(&cache.lnf_out, dlogits, &mut grads.w_head, &mut grads.b_head, l, d, v);
    let d_lnf = matmul_transpose_b(dlogits, &params.w_head, l, d, v);
    let mut dx = layer_norm_backward(
        &d_lnf,
        &cache.lnf_xhat,
        &cache.lnf_rstd,
        &params.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
        l,
        d,
    );

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let g = &mut grads.layers[li];

        // MLP branch: x_out = x_mid + drop(gelu(ln2(x_mid) W_fc) W_proj)
        let mut d_mlp = dx.clone();
        if let Some(m) = &lc.mlp_drop {
            d_mlp.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
        }
        accumulate_weight_grad(&lc.fc_act, &d_mlp, &mut g.w_proj, &mut g.b_proj, l, f, d);
        let mut d_pre = matmul_transpose_b(&d_mlp, &lp.w_proj, l, f, d);
        d_pre.iter_mut().zip(&lc.fc_pre).for_each(|(a, &z)| *a *= gelu_grad(z));
        accumulate_weight_grad(&lc.ln2_out, &d_pre, &mut g.w_fc, &mut g.b_fc, l, d, f);
        let d_ln2 = matmul_transpose_b(&d_pre, &lp.w_fc, l, d, f);
        let d_mid = layer_norm_backward(
            &d_ln2,
            &lc.ln2_xhat,
            &lc.ln2_rstd,
            &lp.ln2_gain,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
            l,
            d,
        );
        dx.iter_mut().zip(&d_mid).for_each(|(a, b)| *a += b);

        // Attention branch: x_mid = x_in + drop(attn(ln1(x_in)) W_out)
        let mut d_attn = dx.clone();
        if let Some(m) = &lc.attn_drop {
            d_attn.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
        }
        accumulate_weight_grad(&lc.attn_concat, &d_attn, &mut g.w_attn_out, &mut g.b_attn_out, l, d, d);
        let d_concat = matmul_transpose_b(&d_attn, &lp.w_attn_out, l, d, d);

        let mut d_qkv = vec![0.0; l * 3 * d];
        let mut dprob = vec![0.0; l];
        for h in 0..nh {
            for i in 0..l {
                let prow = &lc.probs[(h * l + i) * l..][..l];
                let d_out = &d_concat[i * d + h * dh..][..dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    if prow[j] != 0.0 {
                        let vv = &lc.qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        dprob[j] = dot(d_out, vv);
                        weighted += prow[j] * dprob[j];
                        let dv = &mut d_qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        for (a, &b) in dv.iter_mut().zip(d_out) {
                            *a += prow[j] * b;
                        }
                    }
                }
                for j in 0..=i {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dprob[j] - weighted) * scale;
                    for t in 0..dh {
                        let q = lc.qkv[i * 3 * d + h * dh + t];
                        let k = lc.qkv[j * 3 * d + d + h * dh + t];
                        d_qkv[i * 3 * d + h * dh + t] += ds * k;
                        d_qkv[j * 3 * d + d + h * dh + t] += ds * q;
                    }
                }
            }
        }
        accumulate_weight_grad(&lc.ln1_out, &d_qkv, &mut g.w_qkv, &mut g.b_qkv, l, d, 3 * d);
        let d_ln1 = matmul_transpose_b(&d_qkv, &lp.w_qkv, l, d, 3 * d);
        let d_in = layer_norm_backward(
            &d_ln1,
            &lc.ln1_xhat,
            &lc.ln1_rstd,
            &lp.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
            l,
            d,
        );
        dx.iter_mut().zip(&d_in).for_each(|(a, b)| *a += b);
    }

    for i in 0..l {
        let row = &dx[i * d..(i + 1) * d];
        let te = &mut grads.tok_emb[cache.tokens[i] as usize * d..][..d];
        te.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        let pe = &mut grads.pos_emb[cache.positions[i] * d..][..d];
        pe.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, ModelConfig};
    use super::*;
    use crate::model::ops::softmax;

    fn config(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 12,
            dropout: 0.0,
        }
    }

    #[test]
    fn rows_are_distributions() {
        let p = init_params(&config(7), 3).unwrap();
        let out = forward(&p, &[1, 4, 2, 6, 0]).unwrap();
        for t in 0..5 {
            let s: f64 = softmax(out.row(t)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal() {
        let p = init_params(&config(7), 3).unwrap();
        let a = forward(&p, &[1, 4, 2, 6, 0]).unwrap();
        let b = forward(&p, &[1, 4, 2, 3, 5]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn single_token_vocab_is_certain() {
        let p = init_params(&config(1), 3).unwrap();
        let out = forward(&p, &[0, 0, 0]).unwrap();
        for t in 0..3 {
            assert_eq!(softmax(out.row(t)), vec![1.0]);
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let p = init_params(&config(7), 3).unwrap();
        assert!(forward(&p, &[0; 13]).is_err());
        assert!(forward(&p, &[7]).is_err());
    }

    #[test]
    fn left_padding_is_invisible() {
        let p = init_params(&config(7), 9).unwrap();
        let plain = forward(&p, &[3, 1, 2]).unwrap();
        let padded = forward_padded(&p, &[6, 6, 3, 1, 2], 2).unwrap();
        for t in 0..3 {
            for (a, b) in plain.row(t).iter().zip(padded.row(t + 2)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
