//! End-to-end wiring: data preparation, pretraining of the base model, and
//! the on-disk layout of a run directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alt_loop::{params_hash, LoopEnv, RunOutcome};
use crate::config::{RunConfig, VocabConfig};
use crate::corpus::{extract_prompts, generate_corpus, CorpusSpec, Document};
use crate::error::{AltError, Result};
use crate::feedback::{scheme_control_words, ChatTransport, HttpTransport, LlmClient, MockTransport, TemplateRegistry};
use crate::model::{init_params, load_checkpoint, save_checkpoint, sequence_logprob, Parameters};
use crate::trainer::{
    build_row, train_iteration, AdamConfig, KlDirection, LossConfig, OptimizerState, ScheduleConfig, TrainOptions,
    TrainRow,
};
use crate::vocab::{TokenId, Vocabulary};

/// Quantile tokens reserved in every vocabulary.
pub const QUANTILE_TOKENS: usize = 5;

pub fn build_desk_vocabulary(cfg: &VocabConfig) -> Result<Vocabulary> {
    crate::vocab::build_vocabulary(&cfg.neutral, &cfg.toxic, QUANTILE_TOKENS)?
        .with_control_words(&scheme_control_words())
}

/// Corpus split into the pretraining part and the held-out tail.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub docs: Vec<Document>,
    pub heldout: usize,
}

impl Dataset {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let vocab = build_desk_vocabulary(&cfg.vocab)?;
        let docs = generate_corpus(&vocab, &cfg.corpus)?;
        Ok(Self {
            vocab,
            docs,
            heldout: cfg.heldout_documents,
        })
    }

    pub fn train_docs(&self) -> &[Document] {
        &self.docs[..self.docs.len() - self.heldout]
    }

    pub fn heldout_docs(&self) -> &[Document] {
        &self.docs[self.docs.len() - self.heldout..]
    }

    pub fn train_prompts(&self, spec: &CorpusSpec) -> Result<Vec<Vec<TokenId>>> {
        extract_prompts(self.train_docs(), spec)
    }

    pub fn eval_prompts(&self, spec: &CorpusSpec) -> Result<Vec<Vec<TokenId>>> {
        extract_prompts(self.heldout_docs(), spec)
    }
}

/// Perplexity of the best context-free model of the corpus: every position
/// draws from the marginal token distribution implied by the lexicon sizes,
/// the rate levels and the document length.
pub fn unigram_baseline_perplexity(vocab: &Vocabulary, spec: &CorpusSpec) -> f64 {
    let len = spec.doc_length as f64;
    let mean_rate = spec.toxic_rate_levels.iter().sum::<f64>() / spec.toxic_rate_levels.len() as f64;
    let word_share = (len - 1.0) / len;
    let groups = [
        (1.0 / len, 1.0),
        (word_share * mean_rate, vocab.toxic_lexicon().len() as f64),
        (word_share * (1.0 - mean_rate), vocab.neutral_lexicon().len() as f64),
    ];
    let entropy: f64 = groups
        .iter()
        .filter(|(mass, _)| *mass > 0.0)
        .map(|&(mass, n)| -mass * (mass / n).ln())
        .sum();
    entropy.exp()
}

/// `exp` of the mean NLL of every document token after the first.
pub fn corpus_perplexity(params: &Parameters, docs: &[Document], eos: TokenId) -> Result<f64> {
    let per_doc: Vec<(f64, usize)> = docs
        .par_iter()
        .map(|d| {
            let lp = sequence_logprob(params, &d.tokens[..1], &d.tokens[1..], eos)?;
            Ok((-lp.iter().sum::<f64>(), lp.len()))
        })
        .collect::<Result<_>>()?;
    let (nll, n) = per_doc.iter().fold((0.0, 0), |(a, b), &(x, m)| (a + x, b + m));
    if n == 0 {
        return Err(AltError::validation("no tokens to score"));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_perplexity: f64,
    pub heldout_perplexity: f64,
    pub unigram_perplexity: f64,
    pub params_hash: String,
    pub config_hash: String,
}

/// Plain next-token training of a fresh model on the pretraining documents.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, log: Option<&mut dyn Write>) -> Result<(Parameters, PretrainReport)> {
    let vocab = &data.vocab;
    let mut params = init_params(&cfg.model.with_vocab(vocab.len()), cfg.model.init_seed)?;
    let rows: Vec<TrainRow> = data
        .train_docs()
        .iter()
        .map(|d| build_row(None, &[], &d.tokens, vocab, cfg.model.max_seq_len))
        .collect::<Result<_>>()?;
    let p = &cfg.pretrain;
    let total = (p.epochs * rows.len().div_ceil(p.batch_size)) as u64;
    let schedule = ScheduleConfig::with_warmup_ratio(total, p.warmup_ratio);
    let adam = AdamConfig {
        lr: p.lr,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&params, adam);
    let loss = LossConfig {
        beta: 0.0,
        alpha: 0.0,
        kl_direction: KlDirection::RefToPolicy,
    };
    let options = TrainOptions {
        epochs: p.epochs,
        batch_size: p.batch_size,
        seed: p.seed,
        pad: vocab.special().pad,
    };
    let report = train_iteration(&mut params, None, &rows, &loss, &mut opt, &schedule, &options, log)
        .map_err(|e| match e {
            AltError::Numeric { context, detail } => AltError::Numeric {
                context: format!("pretraining, {context}"),
                detail: format!("diverged: {detail}"),
            },
            other => other,
        })?;
    let eos = vocab.special().eos;
    let out = PretrainReport {
        steps: report.steps.len(),
        final_loss: report.steps.last().map_or(f64::NAN, |s| s.loss),
        train_perplexity: corpus_perplexity(&params, data.train_docs(), eos)?,
        heldout_perplexity: corpus_perplexity(&params, data.heldout_docs(), eos)?,
        unigram_perplexity: unigram_baseline_perplexity(vocab, &cfg.corpus),
        params_hash: params_hash(&params),
        config_hash: cfg.hash(),
    };
    Ok((params, out))
}

/// Build the LLM client the config asks for, if any. A mock fixture wins
/// over the HTTP endpoint.
pub fn llm_client(cfg: &RunConfig) -> Result<Option<LlmClient>> {
    let Some(p) = &cfg.provider else {
        return Ok(None);
    };
    let mut templates = TemplateRegistry::builtin();
    if let Some(dir) = &p.template_dir {
        templates.load_dir(dir)?;
    }
    let transport: Arc<dyn ChatTransport> = match &p.mock_fixture {
        Some(path) => Arc::new(MockTransport::from_file(path)?),
        None => Arc::new(HttpTransport::new(&p.client)?),
    };
    Ok(Some(LlmClient::new(p.client.clone(), templates, transport)))
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `<parent>/<stamp>-<first 12 hex digits of the config hash>`.
    pub fn named(parent: &Path, stamp: &str, config_hash: &str) -> Self {
        Self::new(parent.join(format!("{stamp}-{}", &config_hash[..12.min(config_hash.len())])))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }
    pub fn pretrain_report(&self) -> PathBuf {
        self.root.join("pretrain.json")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain_log.jsonl")
    }
    pub fn align(&self, profile: &str) -> PathBuf {
        self.root.join("align").join(profile)
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(AltError::validation(format!("missing artifact {}", path.display())))
        }
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        Self::require(&self.config())?;
        RunConfig::load(&self.config(), None, &[])
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        Self::require(&self.vocab())?;
        Vocabulary::load(&self.vocab())
    }

    pub fn load_base(&self) -> Result<Parameters> {
        Self::require(&self.base_checkpoint())?;
        Ok(load_checkpoint(&self.base_checkpoint())?.params)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AltError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AltError::io(path, e))
}

/// Generate the data, pretrain and write config, vocabulary, corpus, base
/// checkpoint and pretraining report into `dir`.
pub fn pretrain_into(cfg: &RunConfig, dir: &RunDir) -> Result<(Dataset, Parameters, PretrainReport)> {
    std::fs::create_dir_all(&dir.root).map_err(|e| AltError::io(&dir.root, e))?;
    write_file(&dir.config(), cfg.to_toml().as_bytes())?;
    let data = Dataset::prepare(cfg)?;
    data.vocab.save(&dir.vocab())?;
    crate::corpus::write_corpus(&dir.corpus(), &data.docs)?;
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(dir.pretrain_log()).map_err(|e| AltError::io(dir.pretrain_log(), e))?,
    );
    let (params, report) = pretrain(cfg, &data, Some(&mut log))?;
    log.flush().map_err(|e| AltError::io(dir.pretrain_log(), e))?;
    save_checkpoint(&dir.base_checkpoint(), &params, report.steps as u64)?;
    write_file(
        &dir.pretrain_report(),
        (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes(),
    )?;
    Ok((data, params, report))
}

/// Run (or resume) the alignment loop of `cfg` under `dir/align/<profile>`.
pub fn align_in(
    cfg: &RunConfig,
    dir: &RunDir,
    data: &Dataset,
    base: &Parameters,
    resume: bool,
    hook: Option<crate::alt_loop::IterationHook<'_>>,
) -> Result<RunOutcome> {
    let prompts = data.train_prompts(&cfg.corpus)?;
    let client = llm_client(cfg)?;
    let align_dir = dir.align(&cfg.profile);
    let mut env = LoopEnv::new(&data.vocab, &prompts, base);
    env.llm = client.as_ref();
    env.run_dir = Some(&align_dir);
    env.hook = hook;
    if resume && align_dir.join(crate::alt_loop::MANIFEST_FILE).exists() {
        crate::alt_loop::resume(&cfg.loop_, env)
    } else {
        crate::alt_loop::run(&cfg.loop_, env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        let text = "[corpus]\nseed = 1\nnum_documents = 60\ndoc_length = 10\ntoxic_rate_levels = [0.0, 0.3, 0.6]\nprompt_length = 4\n";
        RunConfig::resolve(
            Some(text),
            None,
            &[
                "heldout_documents=20".into(),
                "model.d_model=8".into(),
                "model.d_ff=16".into(),
                "model.n_layers=1".into(),
                "model.max_seq_len=24".into(),
                "pretrain.epochs=1".into(),
                "pretrain.batch_size=8".into(),
            ],
        )
        .unwrap()
    }

    /// Entropy of the marginal token distribution, by enumerating every token.
    fn brute_unigram(vocab: &Vocabulary, spec: &CorpusSpec) -> f64 {
        let mut counts = vec![0.0; vocab.len()];
        let len = spec.doc_length as f64;
        for &r in &spec.toxic_rate_levels {
            let w = 1.0 / spec.toxic_rate_levels.len() as f64;
            counts[vocab.special().eos as usize] += w / len;
            for &t in vocab.toxic_lexicon() {
                counts[t as usize] += w * (len - 1.0) / len * r / vocab.toxic_lexicon().len() as f64;
            }
            for &t in vocab.neutral_lexicon() {
                counts[t as usize] += w * (len - 1.0) / len * (1.0 - r) / vocab.neutral_lexicon().len() as f64;
            }
        }
        let h: f64 = counts.iter().filter(|&&p| p > 0.0).map(|&p| -p * f64::ln(p)).sum();
        h.exp()
    }

    #[test]
    fn unigram_baseline_matches_enumeration() {
        let c = cfg();
        let v = build_desk_vocabulary(&c.vocab).unwrap();
        let a = unigram_baseline_perplexity(&v, &c.corpus);
        assert!((a - brute_unigram(&v, &c.corpus)).abs() < 1e-9 * a);
        // One rate level of zero: eos plus a uniform neutral lexicon.
        let mut s = c.corpus.clone();
        s.toxic_rate_levels = vec![0.0];
        let len = s.doc_length as f64;
        let n = v.neutral_lexicon().len() as f64;
        let h = (1.0 / len) * len.ln() + (len - 1.0) / len * (n * len / (len - 1.0)).ln();
        assert!((unigram_baseline_perplexity(&v, &s) - h.exp()).abs() < 1e-9);
    }

    #[test]
    fn dataset_split() {
        let c = cfg();
        let d = Dataset::prepare(&c).unwrap();
        assert_eq!(d.train_docs().len(), 40);
        assert_eq!(d.heldout_docs().len(), 20);
        assert_eq!(d.eval_prompts(&c.corpus).unwrap().len(), 20);
        assert!(d.eval_prompts(&c.corpus).unwrap().iter().all(|p| p.len() == 4));
    }

    #[test]
    fn pretraining_is_deterministic_and_written_to_disk() {
        let c = cfg();
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let (_, _, r1) = pretrain_into(&c, &RunDir::new(t1.path())).unwrap();
        let (_, _, r2) = pretrain_into(&c, &RunDir::new(t2.path())).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.steps, 5);
        for f in ["base.ckpt", "vocab.json", "corpus.jsonl", "config.toml", "pretrain.json"] {
            assert_eq!(
                std::fs::read(t1.path().join(f)).unwrap(),
                std::fs::read(t2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let dir = RunDir::new(t1.path());
        assert_eq!(dir.load_config().unwrap(), c);
        assert_eq!(params_hash(&dir.load_base().unwrap()), r1.params_hash);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let t = tempfile::tempdir().unwrap();
        let err = RunDir::new(t.path()).load_base().unwrap_err().to_string();
        assert!(err.contains("base.ckpt"));
    }
}
