//! Synthetic corpus with a controllable toxic-word rate.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::rng::Rng;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_documents: usize,
    /// Tokens per document, including the trailing eos.
    pub doc_length: usize,
    pub toxic_rate_levels: Vec<f64>,
    pub prompt_length: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.doc_length < 1 {
            return Err(AltError::validation("doc_length must be at least 1"));
        }
        if self.prompt_length >= self.doc_length {
            return Err(AltError::validation("prompt_length must be smaller than doc_length"));
        }
        if self.toxic_rate_levels.is_empty() {
            return Err(AltError::validation("toxic_rate_levels must be non-empty"));
        }
        if let Some(r) = self
            .toxic_rate_levels
            .iter()
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(AltError::validation(format!("toxic rate {r} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub toxic_rate: f64,
}

/// Draw `num_documents` documents from a single seeded stream. Each document
/// picks one rate level, then draws every non-eos token from the toxic lexicon
/// with that probability and from the neutral lexicon otherwise.
pub fn generate_corpus(vocab: &Vocabulary, spec: &CorpusSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let neutral = vocab.neutral_lexicon();
    let toxic = vocab.toxic_lexicon();
    if neutral.is_empty() || toxic.is_empty() {
        return Err(AltError::validation("corpus generation needs both lexicons"));
    }
    let eos = vocab.special().eos;
    let mut rng = Rng::new(spec.seed);
    let docs = (0..spec.num_documents)
        .map(|_| {
            let rate = spec.toxic_rate_levels[rng.below(spec.toxic_rate_levels.len())];
            let mut tokens = Vec::with_capacity(spec.doc_length);
            for _ in 0..spec.doc_length - 1 {
                let tok = if rng.unit() < rate {
                    toxic[rng.below(toxic.len())]
                } else {
                    neutral[rng.below(neutral.len())]
                };
                tokens.push(tok);
            }
            tokens.push(eos);
            Document {
                tokens,
                toxic_rate: rate,
            }
        })
        .collect();
    Ok(docs)
}

/// Prompt `i` is the first `prompt_length` tokens of document `i`.
pub fn extract_prompts(corpus: &[Document], spec: &CorpusSpec) -> Result<Vec<Vec<TokenId>>> {
    if spec.prompt_length >= spec.doc_length {
        return Err(AltError::validation("prompt_length must be smaller than doc_length"));
    }
    if spec.prompt_length == 0 {
        log::warn!("prompt_length is 0: every prompt is empty (degenerate)");
    }
    corpus
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.tokens
                .get(..spec.prompt_length)
                .map(<[TokenId]>::to_vec)
                .ok_or_else(|| AltError::validation(format!("document {i} shorter than prompt")))
        })
        .collect()
}

pub fn write_corpus(path: &Path, corpus: &[Document]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| AltError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in corpus {
        let line = serde_json::to_string(d).expect("document serializes");
        writeln!(w, "{line}").map_err(|e| AltError::io(path, e))?;
    }
    w.flush().map_err(|e| AltError::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| AltError::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AltError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(
            serde_json::from_str(&line)
                .map_err(|e| AltError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocabulary;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["hi", "sun", "dog", "cat"], &["grr", "ugh"], 5).unwrap()
    }

    fn spec(levels: Vec<f64>) -> CorpusSpec {
        CorpusSpec {
            seed: 7,
            num_documents: 50,
            doc_length: 12,
            toxic_rate_levels: levels,
            prompt_length: 4,
        }
    }

    #[test]
    fn zero_rate_has_no_toxic_tokens() {
        let v = vocab();
        let docs = generate_corpus(&v, &spec(vec![0.0])).unwrap();
        assert!(docs.iter().flat_map(|d| &d.tokens).all(|&t| !v.is_toxic(t)));
    }

    #[test]
    fn unit_rate_is_all_toxic() {
        let v = vocab();
        let docs = generate_corpus(&v, &spec(vec![1.0])).unwrap();
        for d in &docs {
            assert_eq!(d.tokens.len(), 12);
            assert_eq!(*d.tokens.last().unwrap(), v.special().eos);
            assert!(d.tokens[..11].iter().all(|&t| v.is_toxic(t)));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let v = vocab();
        let s = spec(vec![0.0, 0.3, 0.6]);
        let a = generate_corpus(&v, &s).unwrap();
        let b = generate_corpus(&v, &s).unwrap();
        let ser = |d: &[Document]| d.iter().map(|x| serde_json::to_string(x).unwrap()).collect::<Vec<_>>();
        assert_eq!(ser(&a), ser(&b));
    }

    #[test]
    fn prompts_are_prefixes() {
        let v = vocab();
        let eos = v.special().eos;
        let doc = Document {
            tokens: vec![3, 1, 4, eos],
            toxic_rate: 0.0,
        };
        let s = CorpusSpec {
            doc_length: 4,
            prompt_length: 2,
            ..spec(vec![0.0])
        };
        assert_eq!(extract_prompts(&[doc.clone()], &s).unwrap(), vec![vec![3, 1]]);
        let empty = CorpusSpec {
            prompt_length: 0,
            ..s.clone()
        };
        assert_eq!(extract_prompts(&[doc], &empty).unwrap(), vec![Vec::<TokenId>::new()]);

        let docs = generate_corpus(&v, &CorpusSpec { num_documents: 100, ..spec(vec![0.5]) }).unwrap();
        let prompts = extract_prompts(&docs, &spec(vec![0.5])).unwrap();
        assert_eq!(prompts.len(), 100);
        for (p, d) in prompts.iter().zip(&docs) {
            assert_eq!(p[..], d.tokens[..4]);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(spec(vec![]).validate().is_err());
        assert!(spec(vec![1.5]).validate().is_err());
        let bad = CorpusSpec {
            prompt_length: 12,
            ..spec(vec![0.0])
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empirical_rate_within_binomial_bound() {
        let v = vocab();
        let s = CorpusSpec {
            num_documents: 400,
            doc_length: 101,
            ..spec(vec![0.3])
        };
        let docs = generate_corpus(&v, &s).unwrap();
        let n = 100.0;
        let sigma = (0.3f64 * 0.7 / n).sqrt();
        let mut within = 0;
        for d in &docs {
            let frac = d.tokens[..100].iter().filter(|&&t| v.is_toxic(t)).count() as f64 / n;
            if (frac - 0.3).abs() <= 3.0 * sigma {
                within += 1;
            }
        }
        // 3 sigma covers ~99.7% of documents
        assert!(within >= 390, "{within}");
        let all: usize = docs.iter().map(|d| d.tokens[..100].iter().filter(|&&t| v.is_toxic(t)).count()).sum();
        let pooled = all as f64 / (n * 400.0);
        assert!((pooled - 0.3).abs() <= 3.0 * (0.21f64 / 40_000.0).sqrt());
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vocab();
        let docs = generate_corpus(&v, &spec(vec![0.3])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        write_corpus(&p, &docs).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), docs);
    }
}
