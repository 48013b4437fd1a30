//! Run configuration: one TOML file layered over profile defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alt_loop::{content_hash, variant_profile, LoopConfig};
use crate::corpus::CorpusSpec;
use crate::error::{AltError, Result};
use crate::eval::EvalConfig;
use crate::feedback::ClientConfig;
use crate::model::ModelConfig;

pub const DESK_NEUTRAL_WORDS: [&str; 24] = [
    "sun", "tree", "river", "stone", "cloud", "meadow", "lamp", "garden", "bread", "window", "candle", "forest",
    "valley", "harbor", "pebble", "lantern", "orchard", "blanket", "kettle", "violin", "feather", "canyon", "marble",
    "ribbon",
];

pub const DESK_TOXIC_WORDS: [&str; 24] = [
    "idiot", "moron", "stupid", "loser", "jerk", "creep", "dumb", "trash", "pathetic", "worthless", "scum", "fool",
    "nasty", "vile", "rotten", "filthy", "gross", "lame", "ugly", "clown", "sleaze", "slob", "brat", "hack",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub neutral: Vec<String>,
    pub toxic: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            neutral: DESK_NEUTRAL_WORDS.iter().map(|w| w.to_string()).collect(),
            toxic: DESK_TOXIC_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// Model shape; the vocabulary size comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 40,
            dropout: 0.0,
            init_seed: 1,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.05,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AltError::validation("pretrain epochs and batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AltError::validation("pretrain lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(AltError::validation("pretrain warmup_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How feedback from an LLM provider is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub client: ClientConfig,
    /// Replay this fixture file instead of calling the endpoint.
    #[serde(default)]
    pub mock_fixture: Option<PathBuf>,
    /// Extra prompt templates, one file per template.
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    #[serde(default)]
    pub vocab: VocabConfig,
    pub corpus: CorpusSpec,
    /// Documents at the end of the corpus kept out of pretraining and the loop;
    /// their prompts are the evaluation prompts.
    pub heldout_documents: usize,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
}

fn default_tree(profile: &str) -> Result<toml::Table> {
    let loop_ = variant_profile(profile)?;
    let mut eval = EvalConfig::default();
    eval.sampler.max_new_tokens = loop_.sampler.max_new_tokens;
    eval.sampler.min_new_tokens = loop_.sampler.min_new_tokens;
    let tree = toml::Table::try_from(DefaultsView {
        profile: profile.to_string(),
        seed: 0,
        vocab: VocabConfig::default(),
        heldout_documents: 200,
        model: ModelShape::default(),
        pretrain: PretrainConfig::default(),
        loop_,
        eval,
    })
    .expect("defaults serialize");
    Ok(tree)
}

#[derive(Serialize)]
struct DefaultsView {
    profile: String,
    seed: u64,
    vocab: VocabConfig,
    heldout_documents: usize,
    model: ModelShape,
    pretrain: PretrainConfig,
    #[serde(rename = "loop")]
    loop_: LoopConfig,
    eval: EvalConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse a `dotted.key=value` override; the value is read as TOML and falls
/// back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| AltError::validation(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(AltError::validation(format!("override {s:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        node = entry.as_table_mut().expect("table");
    }
    node.insert(last.clone(), value);
}

impl RunConfig {
    /// Resolve a config: profile defaults, then the file's tables, then
    /// `overrides`. The profile comes from `profile`, else the file, else
    /// `alt_rm_toxicity`. The file must contain a `[corpus]` table.
    pub fn resolve(file: Option<&str>, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e| AltError::validation(format!("config: {e}")))?,
            None => toml::Table::new(),
        };
        if !user.contains_key("corpus") {
            return Err(AltError::validation("config has no [corpus] table"));
        }
        let mut parsed = Vec::with_capacity(overrides.len());
        for o in overrides {
            parsed.push(parse_override(o)?);
        }
        let profile_override = parsed
            .iter()
            .rev()
            .find(|(path, _)| path.len() == 1 && path[0] == "profile")
            .and_then(|(_, v)| v.as_str().map(str::to_string));
        let profile = profile
            .map(str::to_string)
            .or(profile_override)
            .or_else(|| user.get("profile").and_then(|v| v.as_str()).map(str::to_string))
            .unwrap_or_else(|| "alt_rm_toxicity".to_string());
        let mut tree = default_tree(&profile)?;
        merge(&mut tree, user);
        tree.insert("profile".into(), toml::Value::String(profile.clone()));
        if let Some(toml::Value::Table(l)) = tree.get_mut("loop") {
            l.insert("profile".into(), toml::Value::String(profile.clone()));
        }
        for (path, value) in parsed {
            if path.len() == 1 && path[0] == "profile" {
                continue;
            }
            set_path(&mut tree, &path, value);
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e| AltError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-resolve a saved, fully expanded config under a possibly different
    /// profile. Profile-dependent tables are dropped when the profile changes
    /// so that the new preset applies.
    pub fn rebase(saved: &str, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = saved
            .parse()
            .map_err(|e| AltError::validation(format!("config: {e}")))?;
        let old = table.get("profile").and_then(|v| v.as_str()).map(str::to_string);
        if profile.is_some_and(|p| old.as_deref() != Some(p)) {
            table.remove("loop");
            if let Some(toml::Value::Table(eval)) = table.get_mut("eval") {
                eval.remove("sampler");
            }
        }
        Self::resolve(Some(&table.to_string()), profile, overrides)
    }

    pub fn load(path: &Path, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AltError::io(path, e))?;
        Self::resolve(Some(&text), profile, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.heldout_documents == 0 || self.heldout_documents >= self.corpus.num_documents {
            return Err(AltError::validation(
                "heldout_documents must be at least 1 and smaller than corpus.num_documents",
            ));
        }
        self.model.with_vocab(1).validate()?;
        self.pretrain.validate()?;
        self.loop_.validate()?;
        self.eval.validate()?;
        if self.corpus.doc_length > self.model.max_seq_len {
            return Err(AltError::validation("model.max_seq_len is shorter than corpus.doc_length"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[corpus]\nseed = 1\nnum_documents = 400\ndoc_length = 24\ntoxic_rate_levels = [0.0, 0.3, 0.6]\nprompt_length = 8\n";

    #[test]
    fn defaults_come_from_the_profile() {
        let c = RunConfig::resolve(Some(MIN), None, &[]).unwrap();
        assert_eq!(c.profile, "alt_rm_toxicity");
        assert_eq!(c.loop_.exemplar_feedback, "Lowest Toxicity");
        let q = RunConfig::resolve(Some(MIN), Some("quark"), &[]).unwrap();
        assert_eq!(q.loop_.profile, "quark");
        assert_ne!(c.hash(), q.hash());
        let o = RunConfig::resolve(Some(MIN), None, &["profile=quark".into()]).unwrap();
        assert_eq!(o, q);
    }

    #[test]
    fn file_and_overrides_layer() {
        let text = format!("{MIN}[loop]\nn_iterations = 4\n[loop.sampler]\ntop_p = 0.8\n");
        let c = RunConfig::resolve(Some(&text), None, &["loop.n_iterations=6".into(), "seed=3".into()]).unwrap();
        assert_eq!(c.loop_.n_iterations, 6);
        assert_eq!(c.loop_.sampler.top_p, 0.8);
        assert_eq!(c.loop_.sampler.max_new_tokens, 20);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MIN}[loop]\nn_iteratons = 4\n");
        let err = RunConfig::resolve(Some(&text), None, &[]).unwrap_err();
        assert!(err.to_string().contains("n_iteratons"), "{err}");
        assert!(RunConfig::resolve(Some(MIN), None, &["modle.d_model=4".into()]).is_err());
    }

    #[test]
    fn missing_corpus_is_a_validation_error() {
        let err = RunConfig::resolve(Some("seed = 1\n"), None, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_profile_lists_profiles() {
        let err = RunConfig::resolve(Some(MIN), Some("ppo"), &[]).unwrap_err().to_string();
        assert!(err.contains("alt_rm_toxicity") && err.contains("steerlm"));
    }

    #[test]
    fn resolved_config_roundtrips() {
        let c = RunConfig::resolve(Some(MIN), Some("alt_lmc"), &[]).unwrap();
        let again = RunConfig::resolve(Some(&c.to_toml()), None, &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn rebase_switches_the_loop_preset() {
        let saved = RunConfig::resolve(Some(MIN), None, &["loop.seed=9".into()]).unwrap().to_toml();
        let same = RunConfig::rebase(&saved, None, &[]).unwrap();
        assert_eq!(same.loop_.seed, 9);
        let lmc = RunConfig::rebase(&saved, Some("alt_lmc"), &[]).unwrap();
        assert_eq!(lmc, RunConfig::resolve(Some(MIN), Some("alt_lmc"), &[]).unwrap());
    }

    #[test]
    fn override_values_parse_as_toml() {
        assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a=Lowest Toxicity").unwrap().1, toml::Value::String("Lowest Toxicity".into()));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }
}
