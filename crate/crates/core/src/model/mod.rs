//! Small decoder-only transformer with hand-written reverse-mode gradients.
//!
//! Pre-norm GPT-2 layout: token + learned absolute position embeddings, then
//! `n_layers` blocks of `x += attn(ln1(x)); x += mlp(ln2(x))`, a final layer
//! norm and an untied output head. All arithmetic is in `f64`.

mod checkpoint;
mod decode;
pub(crate) mod ops;
mod sampler;
mod transformer;

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file,
    Checkpoint, TensorSummary, CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::fill_tensors;
pub use decode::DecodeState;
pub use sampler::{nucleus_support, sample, sample_many, sequence_logprob, SampleOutput, SamplerConfig};
pub use transformer::{backward, forward, forward_padded, forward_train, ForwardCache, ForwardOutput};

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(AltError::validation("model dimensions must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(AltError::validation("max_seq_len must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(AltError::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AltError::validation("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    /// `d_model x 3*d_model`, columns ordered q | k | v.
    pub w_qkv: Vec<f64>,
    pub b_qkv: Vec<f64>,
    pub w_attn_out: Vec<f64>,
    pub b_attn_out: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
}

/// Model weights. The same type doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// `d_model x vocab_size`
    pub w_head: Vec<f64>,
    pub b_head: Vec<f64>,
}

/// A named view of one parameter tensor.
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f64>,
}

macro_rules! tensor_list {
    ($self:ident, $ctor:ident, $iter:ident, $($amp:tt)+) => {{
        let c = $self.config.clone();
        let (v, d, f, s) = (c.vocab_size, c.d_model, c.d_ff, c.max_seq_len);
        let mut out = Vec::new();
        out.push($ctor("tok_emb".to_string(), vec![v, d], $($amp)+ $self.tok_emb));
        out.push($ctor("pos_emb".to_string(), vec![s, d], $($amp)+ $self.pos_emb));
        for (i, l) in $self.layers.$iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push($ctor(p("ln1.gain"), vec![d], $($amp)+ l.ln1_gain));
            out.push($ctor(p("ln1.bias"), vec![d], $($amp)+ l.ln1_bias));
            out.push($ctor(p("attn.w_qkv"), vec![d, 3 * d], $($amp)+ l.w_qkv));
            out.push($ctor(p("attn.b_qkv"), vec![3 * d], $($amp)+ l.b_qkv));
            out.push($ctor(p("attn.w_out"), vec![d, d], $($amp)+ l.w_attn_out));
            out.push($ctor(p("attn.b_out"), vec![d], $($amp)+ l.b_attn_out));
            out.push($ctor(p("ln2.gain"), vec![d], $($amp)+ l.ln2_gain));
            out.push($ctor(p("ln2.bias"), vec![d], $($amp)+ l.ln2_bias));
            out.push($ctor(p("mlp.w_fc"), vec![d, f], $($amp)+ l.w_fc));
            out.push($ctor(p("mlp.b_fc"), vec![f], $($amp)+ l.b_fc));
            out.push($ctor(p("mlp.w_proj"), vec![f, d], $($amp)+ l.w_proj));
            out.push($ctor(p("mlp.b_proj"), vec![d], $($amp)+ l.b_proj));
        }
        out.push($ctor("lnf.gain".to_string(), vec![d], $($amp)+ $self.lnf_gain));
        out.push($ctor("lnf.bias".to_string(), vec![d], $($amp)+ $self.lnf_bias));
        out.push($ctor("head.weight".to_string(), vec![d, v], $($amp)+ $self.w_head));
        out.push($ctor("head.bias".to_string(), vec![v], $($amp)+ $self.b_head));
        out
    }};
}

fn named_ref(name: String, shape: Vec<usize>, data: &Vec<f64>) -> NamedTensor<'_> {
    NamedTensor {
        name,
        shape,
        data: data.as_slice(),
    }
}

fn named_mut(name: String, shape: Vec<usize>, data: &mut Vec<f64>) -> NamedTensorMut<'_> {
    NamedTensorMut { name, shape, data }
}

impl Parameters {
    /// All-zero parameters (used as a gradient accumulator).
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, f, s) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let layer = LayerParams {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w_qkv: vec![0.0; d * 3 * d],
            b_qkv: vec![0.0; 3 * d],
            w_attn_out: vec![0.0; d * d],
            b_attn_out: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w_fc: vec![0.0; d * f],
            b_fc: vec![0.0; f],
            w_proj: vec![0.0; f * d],
            b_proj: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; s * d],
            layers: vec![layer; config.n_layers],
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            w_head: vec![0.0; d * v],
            b_head: vec![0.0; v],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        tensor_list!(self, named_ref, iter, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        tensor_list!(self, named_mut, iter_mut, &mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Flatten every tensor into one vector, in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Initialize weights: normal(0, 0.02) for embeddings and matrices, with the two
/// residual output projections further scaled by `1/sqrt(2 * n_layers)`;
/// layer-norm gains are 1 and all biases 0. Draws follow `tensors()` order.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut params = Parameters::zeros(config);
    let mut rng = Rng::new(seed);
    let resid_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
    for t in params.tensors_mut() {
        let name = t.name.as_str();
        if name.ends_with(".gain") {
            t.data.iter_mut().for_each(|x| *x = 1.0);
        } else if t.shape.len() == 2 {
            let std = if name.ends_with("attn.w_out") || name.ends_with("mlp.w_proj") {
                0.02 * resid_scale
            } else {
                0.02
            };
            t.data.iter_mut().for_each(|x| *x = std * rng.normal());
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny_config();
        assert_eq!(init_params(&c, 5).unwrap(), init_params(&c, 5).unwrap());
        assert_ne!(init_params(&c, 5).unwrap(), init_params(&c, 6).unwrap());
    }

    #[test]
    fn divisibility_is_checked() {
        let c = ModelConfig {
            n_heads: 3,
            ..tiny_config()
        };
        assert!(init_params(&c, 0).is_err());
    }

    #[test]
    fn embedding_shape() {
        let p = init_params(&tiny_config(), 0).unwrap();
        let t = &p.tensors()[0];
        assert_eq!(t.name, "tok_emb");
        assert_eq!(t.shape, vec![11, 8]);
        assert_eq!(t.data.len(), 88);
    }

    #[test]
    fn gains_one_biases_zero() {
        let p = init_params(&tiny_config(), 1).unwrap();
        for t in p.tensors() {
            if t.name.ends_with(".gain") {
                assert!(t.data.iter().all(|&x| x == 1.0));
            } else if t.shape.len() == 1 {
                assert!(t.data.iter().all(|&x| x == 0.0));
            }
        }
    }
}
