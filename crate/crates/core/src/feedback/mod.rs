//! Turning (prompt, generation) pairs into feedback.

mod llm;
mod oracle;
mod quantile;
mod steerlm;
mod template;

pub use llm::{
    llm_categorical, llm_unconstrained, parse_categorical, parse_unconstrained, ChatMessage,
    ChatRequest, ChatResponse, ChatTransport, ClientConfig, HttpTransport, LlmClient,
    MockFixture, MockRule, MockTransport,
};
pub use oracle::toxicity_score;
pub use quantile::{label_for_category, map_rewards_to_quantiles, quantile_group_sizes};
pub use steerlm::{steerlm_linearize, DIALOGUE_LINEARIZATION};
pub use template::{PromptTemplate, TemplateRegistry};

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::vocab::{TokenId, Vocabulary};

/// One textual feedback string, optionally tied to an ordinal category (0 = best).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeedbackLabel {
    pub text: String,
    #[serde(rename = "category", default, skip_serializing_if = "Option::is_none")]
    pub category_index: Option<usize>,
}

impl FeedbackLabel {
    pub fn new(text: impl Into<String>, category_index: Option<usize>) -> Self {
        Self {
            text: text.into(),
            category_index,
        }
    }
}

/// Free-form provider feedback with an integer quality score in `0..=3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnconstrainedFeedback {
    pub analysis: String,
    pub feedback: String,
    pub score: u8,
}

impl UnconstrainedFeedback {
    pub const MAX_SCORE: u8 = 3;

    /// Score class used for balancing, best first (score 3 is class 0).
    pub fn score_class(&self) -> usize {
        (Self::MAX_SCORE - self.score) as usize
    }
}

/// How a feedback label enters the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// The label text, tokenized.
    Textual,
    /// One reserved quantile token per category.
    QuantileToken,
    /// Attribute string such as `harmful:0,helpful:2`, tokenized.
    Linearized,
}

/// Ordered labels, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileScheme {
    pub k: usize,
    pub labels: Vec<FeedbackLabel>,
    pub encoding: Encoding,
}

impl QuantileScheme {
    pub fn new<S: AsRef<str>>(texts: &[S], encoding: Encoding) -> Result<Self> {
        let labels: Vec<FeedbackLabel> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| FeedbackLabel::new(t.as_ref(), Some(i)))
            .collect();
        let scheme = Self {
            k: labels.len(),
            labels,
            encoding,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.labels.len() != self.k {
            return Err(AltError::validation("scheme must have k >= 1 labels"));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.text.trim().is_empty() {
                return Err(AltError::validation("empty feedback label"));
            }
            if self.labels[..i].iter().any(|o| o.text == l.text) {
                return Err(AltError::validation(format!("duplicate label {:?}", l.text)));
            }
        }
        Ok(())
    }

    pub fn with_encoding(&self, encoding: Encoding) -> Self {
        Self {
            encoding,
            ..self.clone()
        }
    }

    pub fn best(&self) -> &FeedbackLabel {
        &self.labels[0]
    }

    /// Index of the label with this text, if any.
    pub fn position(&self, text: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.text == text)
    }
}

pub const TOXICITY_LABELS: [&str; 5] = [
    "Lowest Toxicity",
    "Low-Moderate Toxicity",
    "Moderate Toxicity",
    "High-Moderate Toxicity",
    "Maximum Toxicity",
];

/// Alternate five-level toxicity wording, best first.
pub const TOXICITY_ALT_LABELS: [&str; 5] = [
    "nontoxic",
    "slightly toxic",
    "medium toxic",
    "toxic",
    "very toxic",
];

pub const SUMMARIZATION_LABELS: [&str; 5] = ["Excellent", "Good", "Mediocre", "Bad", "Horrible"];

pub const DIALOGUE_LABELS: [&str; 4] = [
    "Harmless and very helpful",
    "Harmless and helpful",
    "Harmless and not helpful",
    "Harmful",
];

pub fn toxicity_scheme(encoding: Encoding) -> QuantileScheme {
    QuantileScheme::new(&TOXICITY_LABELS, encoding).expect("static scheme")
}

pub fn toxicity_alt_scheme() -> QuantileScheme {
    QuantileScheme::new(&TOXICITY_ALT_LABELS, Encoding::Textual).expect("static scheme")
}

pub fn summarization_scheme() -> QuantileScheme {
    QuantileScheme::new(&SUMMARIZATION_LABELS, Encoding::Textual).expect("static scheme")
}

pub fn dialogue_scheme(encoding: Encoding) -> QuantileScheme {
    QuantileScheme::new(&DIALOGUE_LABELS, encoding).expect("static scheme")
}

/// Model-input tokens for `label` under `encoding`.
pub fn feedback_tokens(label: &FeedbackLabel, encoding: Encoding, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    match encoding {
        Encoding::Textual => vocab.encode(&label.text),
        Encoding::Linearized => vocab.encode(steerlm_linearize(label)?),
        Encoding::QuantileToken => {
            let q = &vocab.special().quantile;
            label
                .category_index
                .and_then(|c| q.get(c).copied())
                .map(|t| vec![t])
                .ok_or_else(|| {
                    AltError::validation(format!(
                        "label {:?} has no quantile token (category {:?}, {} tokens)",
                        label.text,
                        label.category_index,
                        q.len()
                    ))
                })
        }
    }
}

/// Every word needed to encode the shipped schemes, for vocabulary building.
pub fn scheme_control_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let texts = TOXICITY_LABELS
        .iter()
        .chain(&TOXICITY_ALT_LABELS)
        .chain(&SUMMARIZATION_LABELS)
        .chain(&DIALOGUE_LABELS)
        .map(|s| s.to_string())
        .chain(DIALOGUE_LINEARIZATION.iter().map(|(_, l)| l.to_string()));
    for text in texts {
        let mut word = String::new();
        for c in text.chars().chain([' ']) {
            if c.is_whitespace() || c == ',' || c == ':' {
                for w in [std::mem::take(&mut word), c.to_string()] {
                    if !w.trim().is_empty() && !words.contains(&w) {
                        words.push(w);
                    }
                }
            } else {
                word.push(c);
            }
        }
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocabulary;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["sun"], &["grr"], 5)
            .unwrap()
            .with_control_words(&scheme_control_words())
            .unwrap()
    }

    #[test]
    fn every_shipped_label_encodes() {
        let v = vocab();
        for scheme in [
            toxicity_scheme(Encoding::Textual),
            toxicity_alt_scheme(),
            summarization_scheme(),
            dialogue_scheme(Encoding::Textual),
            dialogue_scheme(Encoding::Linearized),
        ] {
            for l in &scheme.labels {
                assert!(!feedback_tokens(l, scheme.encoding, &v).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn quantile_encoding_is_one_token() {
        let v = vocab();
        let s = toxicity_scheme(Encoding::QuantileToken);
        assert_eq!(feedback_tokens(&s.labels[0], s.encoding, &v).unwrap(), vec![v.special().quantile[0]]);
        let bare = FeedbackLabel::new("Lowest Toxicity", None);
        assert!(feedback_tokens(&bare, Encoding::QuantileToken, &v).is_err());
    }

    #[test]
    fn scheme_validation() {
        assert!(QuantileScheme::new(&["a", "a"], Encoding::Textual).is_err());
        assert!(QuantileScheme::new::<&str>(&[], Encoding::Textual).is_err());
        assert_eq!(toxicity_scheme(Encoding::Textual).k, 5);
    }
}
