use super::FeedbackLabel;
use crate::error::{AltError, Result};

/// Dialogue category to linearized attribute string.
pub const DIALOGUE_LINEARIZATION: [(&str, &str); 4] = [
    ("Harmless and very helpful", "harmful:0,helpful:2"),
    ("Harmless and helpful", "harmful:0,helpful:1"),
    ("Harmless and not helpful", "harmful:0,helpful:0"),
    ("Harmful", "harmful:1,helpful:0"),
];

pub fn steerlm_linearize(label: &FeedbackLabel) -> Result<&'static str> {
    DIALOGUE_LINEARIZATION
        .iter()
        .find(|(k, _)| *k == label.text)
        .map(|(_, v)| *v)
        .ok_or_else(|| AltError::validation(format!("{:?} is not a dialogue label", label.text)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn mapping_and_rejection() {
        let f = |t: &str| steerlm_linearize(&FeedbackLabel::new(t, None));
        assert_eq!(f("Harmless and very helpful").unwrap(), "harmful:0,helpful:2");
        assert_eq!(f("Harmful").unwrap(), "harmful:1,helpful:0");
        assert!(f("Excellent").is_err());
    }

    #[test]
    fn injective() {
        let outs: HashSet<_> = DIALOGUE_LINEARIZATION.iter().map(|(_, v)| v).collect();
        assert_eq!(outs.len(), 4);
    }
}
