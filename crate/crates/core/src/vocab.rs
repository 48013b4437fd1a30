//! Closed word-level vocabulary with special tokens.
//!
//! Id layout: neutral words in listed order, toxic words in listed order, then
//! `<pad>`, `<eos>`, `<|separator|>`, then one token per reward quantile. Words
//! used only in feedback strings ("control words") are appended after the
//! quantile tokens; they belong to neither lexicon.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};

pub type TokenId = u32;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const SEPARATOR_TOKEN: &str = "<|separator|>";

/// Characters split off as standalone tokens when encoding text.
const PUNCTUATION: [char; 2] = [',', ':'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub eos: TokenId,
    pub separator: TokenId,
    pub quantile: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialTokens,
    neutral: Vec<TokenId>,
    toxic: Vec<TokenId>,
    toxic_mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    special: SpecialTokens,
    toxic: Vec<TokenId>,
    neutral: Vec<TokenId>,
}

pub fn quantile_token_name(k: usize) -> String {
    format!("<q{k}>")
}

fn check_word(word: &str) -> Result<()> {
    if word.is_empty() {
        return Err(AltError::validation("empty word"));
    }
    if word.chars().any(char::is_whitespace) {
        return Err(AltError::validation(format!("word {word:?} contains whitespace")));
    }
    let is_punct = word.chars().count() == 1 && word.chars().all(|c| PUNCTUATION.contains(&c));
    if !is_punct && word.chars().any(|c| PUNCTUATION.contains(&c)) {
        return Err(AltError::validation(format!("word {word:?} contains punctuation")));
    }
    if word.starts_with('<') && word.ends_with('>') {
        return Err(AltError::validation(format!("word {word:?} is reserved for special tokens")));
    }
    Ok(())
}

/// Build a vocabulary from disjoint neutral and toxic word lists plus `k_quantiles`
/// quantile tokens.
pub fn build_vocabulary<S: AsRef<str>>(
    neutral_words: &[S],
    toxic_words: &[S],
    k_quantiles: usize,
) -> Result<Vocabulary> {
    if neutral_words.is_empty() || toxic_words.is_empty() {
        return Err(AltError::validation("lexicons must be non-empty"));
    }
    if k_quantiles == 0 {
        return Err(AltError::validation("k_quantiles must be at least 1"));
    }
    let mut seen = HashSet::new();
    for w in neutral_words.iter().chain(toxic_words) {
        let w = w.as_ref();
        check_word(w)?;
        if !seen.insert(w) {
            return Err(AltError::validation(format!("duplicate or overlapping word {w:?}")));
        }
    }

    let mut tokens: Vec<String> = neutral_words
        .iter()
        .chain(toxic_words)
        .map(|w| w.as_ref().to_string())
        .collect();
    let n_neutral = neutral_words.len();
    let n_words = tokens.len();
    let neutral = (0..n_neutral as TokenId).collect();
    let toxic = (n_neutral as TokenId..n_words as TokenId).collect();

    tokens.push(PAD_TOKEN.into());
    tokens.push(EOS_TOKEN.into());
    tokens.push(SEPARATOR_TOKEN.into());
    let base = n_words as TokenId;
    let special = SpecialTokens {
        pad: base,
        eos: base + 1,
        separator: base + 2,
        quantile: (0..k_quantiles).map(|k| base + 3 + k as TokenId).collect(),
    };
    tokens.extend((0..k_quantiles).map(quantile_token_name));

    Vocabulary::assemble(tokens, special, neutral, toxic)
}

impl Vocabulary {
    fn assemble(
        tokens: Vec<String>,
        special: SpecialTokens,
        neutral: Vec<TokenId>,
        toxic: Vec<TokenId>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(AltError::validation(format!("duplicate token {t:?}")));
            }
        }
        let v = tokens.len();
        let mut ids: Vec<TokenId> = vec![special.pad, special.eos, special.separator];
        ids.extend(&special.quantile);
        ids.extend(&neutral);
        ids.extend(&toxic);
        if ids.iter().any(|&id| id as usize >= v) {
            return Err(AltError::validation("token id out of range"));
        }
        let unique: HashSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(AltError::validation("special ids and lexicons must be pairwise disjoint"));
        }
        let mut toxic_mask = vec![false; v];
        for &t in &toxic {
            toxic_mask[t as usize] = true;
        }
        Ok(Self {
            tokens,
            index,
            special,
            neutral,
            toxic,
            toxic_mask,
        })
    }

    /// Append words that may appear in feedback strings but never in the corpus.
    /// Words already present are skipped.
    pub fn with_control_words<S: AsRef<str>>(mut self, words: &[S]) -> Result<Self> {
        for w in words {
            let w = w.as_ref();
            check_word(w)?;
            if self.index.contains_key(w) {
                continue;
            }
            let id = self.tokens.len() as TokenId;
            self.tokens.push(w.to_string());
            self.index.insert(w.to_string(), id);
            self.toxic_mask.push(false);
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> &SpecialTokens {
        &self.special
    }

    pub fn neutral_lexicon(&self) -> &[TokenId] {
        &self.neutral
    }

    pub fn toxic_lexicon(&self) -> &[TokenId] {
        &self.toxic
    }

    pub fn is_toxic(&self, id: TokenId) -> bool {
        self.toxic_mask.get(id as usize).copied().unwrap_or(false)
    }

    /// Pad, eos, separator and quantile tokens.
    pub fn is_special(&self, id: TokenId) -> bool {
        let s = &self.special;
        id == s.pad || id == s.eos || id == s.separator || s.quantile.contains(&id)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Split text on whitespace, detach `,` and `:` as their own tokens, and map
    /// every piece to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut start = 0;
            for (i, c) in chunk.char_indices() {
                if PUNCTUATION.contains(&c) {
                    if i > start {
                        out.push(self.lookup(&chunk[start..i])?);
                    }
                    out.push(self.lookup(&chunk[i..i + c.len_utf8()])?);
                    start = i + c.len_utf8();
                }
            }
            if start < chunk.len() {
                out.push(self.lookup(&chunk[start..])?);
            }
        }
        Ok(out)
    }

    fn lookup(&self, piece: &str) -> Result<TokenId> {
        self.id(piece)
            .ok_or_else(|| AltError::validation(format!("out-of-vocabulary word {piece:?}")))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            special: self.special.clone(),
            toxic: self.toxic.clone(),
            neutral: self.neutral.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| AltError::Format(format!("vocabulary: {e}")))?;
        Self::assemble(file.tokens, file.special, file.neutral, file.toxic)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| AltError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AltError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_and_toxic_lexicon() {
        let v = build_vocabulary(&["hi", "sun"], &["grr"], 5).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v.toxic_lexicon(), &[v.id("grr").unwrap()]);
    }

    #[test]
    fn overlap_is_rejected() {
        assert!(matches!(
            build_vocabulary(&["a"], &["a"], 5),
            Err(AltError::Validation(_))
        ));
        assert!(build_vocabulary(&["a", "a"], &["b"], 5).is_err());
        assert!(build_vocabulary(&["a"], &["b"], 0).is_err());
        assert!(build_vocabulary::<&str>(&[], &["b"], 1).is_err());
    }

    #[test]
    fn id_assignment_rule() {
        let v = build_vocabulary(&["hi", "sun", "dog"], &["grr", "ugh"], 5).unwrap();
        for (i, w) in ["hi", "sun", "dog", "grr", "ugh"].iter().enumerate() {
            assert_eq!(v.id(w), Some(i as TokenId));
        }
        let s = v.special();
        assert_eq!((s.pad, s.eos, s.separator), (5, 6, 7));
        assert_eq!(s.quantile, vec![8, 9, 10, 11, 12]);
        assert_eq!(v.token(7), Some(SEPARATOR_TOKEN));
    }

    #[test]
    fn control_words_extend_after_quantiles() {
        let v = build_vocabulary(&["hi"], &["grr"], 2)
            .unwrap()
            .with_control_words(&["Lowest", "Toxicity", "hi", ":", ","])
            .unwrap();
        assert_eq!(v.id("Lowest"), Some(7));
        assert_eq!(v.len(), 11);
        assert!(!v.is_toxic(7));
        assert!(v.with_control_words(&["a,b"]).is_err());
    }

    #[test]
    fn encode_splits_punctuation() {
        let v = build_vocabulary(&["harmful", "helpful"], &["grr"], 1)
            .unwrap()
            .with_control_words(&[":", ",", "0", "2"])
            .unwrap();
        let ids = v.encode("harmful:0,helpful:2").unwrap();
        assert_eq!(v.decode(&ids), "harmful : 0 , helpful : 2");
        assert!(v.encode("unknown").is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = build_vocabulary(&["hi", "sun"], &["grr"], 3)
            .unwrap()
            .with_control_words(&["Good"])
            .unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn encode_inverts_decode(ids in prop::collection::vec(0u32..14, 0..40)) {
            let v = build_vocabulary(&["hi", "sun", "dog"], &["grr", "ugh"], 5)
                .unwrap()
                .with_control_words(&[":"])
                .unwrap();
            prop_assert_eq!(v.encode(&v.decode(&ids)).unwrap(), ids);
        }
    }
}
