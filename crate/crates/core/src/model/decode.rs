//! Incremental decoding with a key/value cache.

use super::ops::{dot, gelu, layer_norm, matmul_bias};
use super::Parameters;
use crate::error::{AltError, Result};
use crate::vocab::TokenId;

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn new(params: &Parameters) -> Self {
        let n = params.config.n_layers;
        Self {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed one token at the next position and return its logits.
    pub fn step(&mut self, params: &Parameters, token: TokenId) -> Result<Vec<f64>> {
        let c = &params.config;
        if self.len >= c.max_seq_len {
            return Err(AltError::validation("decode past max_seq_len"));
        }
        if token as usize >= c.vocab_size {
            return Err(AltError::validation(format!("token id {token} outside vocabulary")));
        }
        let (d, f, nh, dh) = (c.d_model, c.d_ff, c.n_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;

        let mut x: Vec<f64> = params.tok_emb[token as usize * d..][..d]
            .iter()
            .zip(&params.pos_emb[pos * d..][..d])
            .map(|(a, b)| a + b)
            .collect();

        for (li, lp) in params.layers.iter().enumerate() {
            let (h1, _, _) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias, 1, d);
            let qkv = matmul_bias(&h1, &lp.w_qkv, &lp.b_qkv, 1, d, 3 * d);
            self.keys[li].extend_from_slice(&qkv[d..2 * d]);
            self.values[li].extend_from_slice(&qkv[2 * d..]);
            let keys = &self.keys[li];
            let values = &self.values[li];

            let mut concat = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for h in 0..nh {
                let q = &qkv[h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=pos {
                    scores[j] = dot(q, &keys[j * d + h * dh..][..dh]) * scale;
                    max = max.max(scores[j]);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut concat[h * dh..][..dh];
                for j in 0..=pos {
                    let p = scores[j] / sum;
                    for (o, &val) in out.iter_mut().zip(&values[j * d + h * dh..][..dh]) {
                        *o += p * val;
                    }
                }
            }
            let attn = matmul_bias(&concat, &lp.w_attn_out, &lp.b_attn_out, 1, d, d);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);

            let (h2, _, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias, 1, d);
            let act: Vec<f64> = matmul_bias(&h2, &lp.w_fc, &lp.b_fc, 1, d, f)
                .into_iter()
                .map(gelu)
                .collect();
            let mlp = matmul_bias(&act, &lp.w_proj, &lp.b_proj, 1, f, d);
            x.iter_mut().zip(&mlp).for_each(|(a, b)| *a += b);
        }

        self.len += 1;
        let (hf, _, _) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias, 1, d);
        Ok(matmul_bias(&hf, &params.w_head, &params.b_head, 1, d, c.vocab_size))
    }
}
