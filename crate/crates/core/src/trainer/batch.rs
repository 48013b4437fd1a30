use crate::error::{AltError, Result};
use crate::feedback::{feedback_tokens, Encoding, FeedbackLabel};
use crate::vocab::{TokenId, Vocabulary};

/// One unpadded training sequence: `[feedback][separator][prompt][generation]`.
/// Unconditioned rows have no feedback block and no separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainRow {
    pub tokens: Vec<TokenId>,
    /// Feedback tokens plus the separator; 0 when unconditioned.
    pub context_len: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl TrainRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 1 exactly on generation positions.
    pub fn mask(&self) -> Vec<u8> {
        let start = self.context_len + self.prompt_len;
        (0..self.len()).map(|i| u8::from(i >= start)).collect()
    }

    pub fn generation(&self) -> &[TokenId] {
        &self.tokens[self.context_len + self.prompt_len..]
    }

    /// `[prompt][generation]`, the input seen by the reference model.
    pub fn without_feedback(&self) -> &[TokenId] {
        &self.tokens[self.context_len..]
    }
}

/// Assemble a row from already-tokenized feedback. `None` gives an
/// unconditioned row.
pub fn build_row(
    feedback: Option<&[TokenId]>,
    prompt: &[TokenId],
    generation: &[TokenId],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<TrainRow> {
    let mut tokens = Vec::with_capacity(feedback.map_or(0, |f| f.len() + 1) + prompt.len() + generation.len());
    if let Some(f) = feedback {
        tokens.extend_from_slice(f);
        tokens.push(vocab.special().separator);
    }
    let context_len = tokens.len();
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(generation);
    if generation.is_empty() {
        return Err(AltError::validation("training row has an empty generation"));
    }
    if tokens.len() > max_seq_len {
        return Err(AltError::validation(format!(
            "training row of {} tokens (feedback {}, prompt {}, generation {}) exceeds max_seq_len {max_seq_len}",
            tokens.len(),
            context_len,
            prompt.len(),
            generation.len()
        )));
    }
    Ok(TrainRow {
        tokens,
        context_len,
        prompt_len: prompt.len(),
        gen_len: generation.len(),
    })
}

pub fn build_training_sequence(
    feedback: Option<&FeedbackLabel>,
    prompt: &[TokenId],
    generation: &[TokenId],
    encoding: Encoding,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<TrainRow> {
    let fb = feedback.map(|f| feedback_tokens(f, encoding, vocab)).transpose()?;
    build_row(fb.as_deref(), prompt, generation, vocab, max_seq_len)
}

/// A row after batch padding: left pads before the feedback block so every
/// feedback block ends at the same column, right pads after the generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedRow {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<u8>,
    pub n_pad: usize,
    pub row: TrainRow,
}

impl PaddedRow {
    /// Left pads plus the real tokens; trailing pads are never attended to by
    /// real positions and are dropped before the forward pass.
    pub fn attended(&self) -> &[TokenId] {
        &self.tokens[..self.n_pad + self.row.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub rows: Vec<PaddedRow>,
}

impl TrainBatch {
    pub fn new(rows: &[TrainRow], pad: TokenId, max_seq_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(AltError::validation("empty batch"));
        }
        let ctx = rows.iter().map(|r| r.context_len).max().unwrap_or(0);
        let width = rows.iter().map(|r| ctx - r.context_len + r.len()).max().unwrap_or(0);
        if width > max_seq_len {
            return Err(AltError::validation(format!(
                "padded batch width {width} exceeds max_seq_len {max_seq_len}"
            )));
        }
        let rows = rows
            .iter()
            .map(|r| {
                let n_pad = ctx - r.context_len;
                let mut tokens = vec![pad; n_pad];
                tokens.extend_from_slice(&r.tokens);
                let mut mask = vec![0u8; n_pad];
                mask.extend(r.mask());
                tokens.resize(width, pad);
                mask.resize(width, 0);
                PaddedRow {
                    tokens,
                    mask,
                    n_pad,
                    row: r.clone(),
                }
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.tokens.len())
    }
}
