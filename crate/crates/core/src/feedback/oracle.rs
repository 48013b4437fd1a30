use crate::vocab::{TokenId, Vocabulary};

/// Fraction of non-special tokens that belong to the toxic lexicon; 0 for a
/// generation with no scorable tokens.
pub fn toxicity_score(vocab: &Vocabulary, generation: &[TokenId]) -> f64 {
    let (toxic, total) = generation
        .iter()
        .filter(|&&t| !vocab.is_special(t))
        .fold((0usize, 0usize), |(x, n), &t| (x + vocab.is_toxic(t) as usize, n + 1));
    if total == 0 {
        0.0
    } else {
        toxic as f64 / total as f64
    }
}
