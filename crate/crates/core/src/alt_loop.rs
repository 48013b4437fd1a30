//! The sample → annotate → train loop and its run artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AltError, Result};
use crate::feedback::{
    dialogue_scheme, feedback_tokens, label_for_category, llm_categorical, llm_unconstrained,
    map_rewards_to_quantiles, summarization_scheme, toxicity_score, toxicity_scheme, Encoding, FeedbackLabel,
    LlmClient, QuantileScheme,
};
use crate::model::{load_checkpoint, sample_many, save_checkpoint, Parameters, SampleOutput, SamplerConfig};
use crate::pool::{balanced_indices, DataPool, PoolEntry, PoolFeedback, Provenance};
use crate::rng::{derive_seed, tag, Rng};
use crate::trainer::{
    build_training_sequence, train_iteration, AdamConfig, KlDirection, LossConfig, OptimizerState,
    ScheduleConfig, TrainOptions, TrainRow,
};
use crate::vocab::{TokenId, Vocabulary};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Oracle reward, mapped to per-prompt quantiles and then to labels.
    RewardQuantile,
    /// LLM picks one label of the scheme.
    LlmCategorical,
    /// LLM writes free-form feedback with a 0..=3 score.
    LlmUnconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub profile: String,
    pub n_iterations: u32,
    /// Prompts drawn with replacement per iteration.
    pub prompts_per_iteration: usize,
    pub generations_per_prompt: usize,
    pub train_per_category: usize,
    /// Feedback text conditioning sampling from iteration 2 on. For
    /// unconstrained feedback this is the fallback when the pool holds no
    /// top-score feedback yet.
    pub exemplar_feedback: String,
    pub provider: ProviderKind,
    pub scheme: QuantileScheme,
    #[serde(default)]
    pub template_id: Option<String>,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    /// Optimizer steps for the whole run; estimated from the sizes when unset.
    #[serde(default)]
    pub total_steps: Option<u64>,
    /// Train on every earlier iteration's selection too, not just the current one.
    #[serde(default)]
    pub replay_selections: bool,
    /// Keep samples that hit the token budget out of training. Off for tasks
    /// whose continuations always run to the budget.
    #[serde(default = "default_true")]
    pub filter_truncated: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

pub const PROFILES: [&str; 6] = ["alt_rm_toxicity", "alt_rm", "quark", "steerlm", "alt_lmc", "alt_lmu"];

/// Preset loop configuration for a named variant, at desk scale.
pub fn variant_profile(name: &str) -> Result<LoopConfig> {
    let toxicity = |profile: &str, encoding| LoopConfig {
        profile: profile.into(),
        n_iterations: 10,
        prompts_per_iteration: 64,
        generations_per_prompt: 16,
        train_per_category: 2,
        exemplar_feedback: "Lowest Toxicity".into(),
        provider: ProviderKind::RewardQuantile,
        scheme: toxicity_scheme(encoding),
        template_id: None,
        sampler: SamplerConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 20,
            min_new_tokens: 20,
            seed: 0,
            greedy: false,
        },
        loss: LossConfig {
            beta: 0.05,
            alpha: 0.06,
            kl_direction: KlDirection::RefToPolicy,
        },
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        epochs: 2,
        batch_size: 16,
        warmup_ratio: 0.05,
        total_steps: None,
        replay_selections: false,
        filter_truncated: false,
        seed: 0,
    };
    let dialogue = |profile: &str, encoding| LoopConfig {
        provider: ProviderKind::LlmCategorical,
        scheme: dialogue_scheme(encoding),
        exemplar_feedback: "Harmless and very helpful".into(),
        template_id: Some("categorical_dialogue".into()),
        generations_per_prompt: 20,
        sampler: SamplerConfig {
            temperature: 1.0,
            top_p: 0.9,
            max_new_tokens: 20,
            min_new_tokens: 0,
            seed: 0,
            greedy: false,
        },
        loss: LossConfig {
            beta: 0.0,
            alpha: 0.06,
            kl_direction: KlDirection::RefToPolicy,
        },
        filter_truncated: true,
        ..toxicity(profile, Encoding::Textual)
    };
    match name {
        "alt_rm_toxicity" | "alt_rm" => Ok(toxicity("alt_rm_toxicity", Encoding::Textual)),
        "quark" => Ok(toxicity("quark", Encoding::QuantileToken)),
        "alt_lmc" => Ok(dialogue("alt_lmc", Encoding::Textual)),
        "steerlm" => Ok(dialogue("steerlm", Encoding::Linearized)),
        "alt_lmu" => Ok(LoopConfig {
            provider: ProviderKind::LlmUnconstrained,
            scheme: summarization_scheme(),
            exemplar_feedback: "Excellent".into(),
            template_id: Some("unconstrained_summarization".into()),
            sampler: SamplerConfig {
                temperature: 0.9,
                top_p: 0.9,
                max_new_tokens: 20,
                min_new_tokens: 0,
                seed: 0,
                greedy: false,
            },
            ..dialogue("alt_lmu", Encoding::Textual)
        }),
        other => Err(AltError::validation(format!(
            "unknown profile {other:?}; known profiles: {}",
            PROFILES.join(", ")
        ))),
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || self.prompts_per_iteration == 0 || self.generations_per_prompt == 0 {
            return Err(AltError::validation("n_iterations, prompts_per_iteration and generations_per_prompt must be >= 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AltError::validation("epochs and batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(AltError::validation("warmup_ratio must lie in [0, 1]"));
        }
        self.scheme.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        match self.provider {
            ProviderKind::RewardQuantile | ProviderKind::LlmCategorical => {
                if self.scheme.position(&self.exemplar_feedback).is_none() {
                    return Err(AltError::validation(format!(
                        "exemplar feedback {:?} is not a label of the scheme",
                        self.exemplar_feedback
                    )));
                }
            }
            ProviderKind::LlmUnconstrained => {
                if self.exemplar_feedback.trim().is_empty() {
                    return Err(AltError::validation("exemplar feedback is empty"));
                }
            }
        }
        if self.provider != ProviderKind::RewardQuantile && self.template_id.is_none() {
            return Err(AltError::validation("LLM providers need template_id"));
        }
        Ok(())
    }

    /// Upper bound on optimizer steps: every prompt slot fills every category.
    pub fn estimated_total_steps(&self) -> u64 {
        let per_slot = (self.scheme.k * self.train_per_category).min(self.generations_per_prompt);
        let rows = self.prompts_per_iteration * per_slot;
        let batches = rows.div_ceil(self.batch_size) as u64;
        let mut total = 0;
        for k in 1..=self.n_iterations as u64 {
            let seen = if self.replay_selections { k } else { 1 };
            total += self.epochs as u64 * (batches * seen);
        }
        total
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig::with_warmup_ratio(self.total_steps.unwrap_or_else(|| self.estimated_total_steps()), self.warmup_ratio)
    }

}

/// SHA-256 of the canonical JSON encoding, hex.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn params_hash(params: &Parameters) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        h.update(t.name.as_bytes());
        for x in t.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rows: usize,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub mean_nll: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub last_lr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub samples: usize,
    pub annotated: usize,
    pub unparseable: usize,
    pub unencodable: usize,
    pub truncated: usize,
    pub selected: usize,
    pub pool_size: usize,
    pub category_histogram: BTreeMap<usize, usize>,
    /// Mean oracle toxicity of this iteration's samples.
    pub mean_sample_score: f64,
    pub mean_sample_length: f64,
    /// Feedback texts conditioning this iteration's sampling.
    pub exemplars: Vec<String>,
    pub train: TrainSummary,
    pub checkpoint: Option<String>,
    pub optimizer: Option<String>,
    #[serde(default)]
    pub eval: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub profile: String,
    pub config_hash: String,
    pub base_params_hash: String,
    pub config: LoopConfig,
    pub iterations: Vec<IterationRecord>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| AltError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AltError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AltError::Format(format!("{}: {e}", path.display())))
    }

    pub fn completed(&self) -> u32 {
        self.iterations.last().map_or(0, |r| r.iteration)
    }

    /// Per-iteration series of the sample statistics and any recorded eval
    /// metrics, as CSV.
    pub fn plot_data(&self) -> String {
        let mut eval_keys: Vec<String> = Vec::new();
        for r in &self.iterations {
            if let Some(serde_json::Value::Object(m)) = &r.eval {
                for (k, v) in m {
                    if v.is_number() && !eval_keys.contains(k) {
                        eval_keys.push(k.clone());
                    }
                }
            }
        }
        let mut out = String::from("iteration,mean_sample_score,mean_sample_length,truncated,selected,pool_size,mean_loss");
        for k in &eval_keys {
            out.push_str(&format!(",eval_{k}"));
        }
        out.push('\n');
        for r in &self.iterations {
            let loss = r.train.mean_loss.map_or(String::new(), |x| x.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.iteration, r.mean_sample_score, r.mean_sample_length, r.truncated, r.selected, r.pool_size, loss
            ));
            for k in &eval_keys {
                let v = r.eval.as_ref().and_then(|e| e.get(k)).and_then(|v| v.as_f64());
                out.push_str(&format!(",{}", v.map_or(String::new(), |x| x.to_string())));
            }
            out.push('\n');
        }
        out
    }
}

/// Hook called after each iteration's checkpoint; its value is stored in the
/// manifest row.
pub type IterationHook<'a> = Box<dyn FnMut(u32, &Parameters) -> Result<serde_json::Value> + 'a>;

/// Everything a run reads but does not own.
pub struct LoopEnv<'a> {
    pub vocab: &'a Vocabulary,
    pub prompts: &'a [Vec<TokenId>],
    /// Frozen reference model (the starting policy).
    pub reference: &'a Parameters,
    pub llm: Option<&'a LlmClient>,
    /// Where checkpoints, pool and manifest go; nothing is written when unset.
    pub run_dir: Option<&'a Path>,
    pub hook: Option<IterationHook<'a>>,
    /// Stop after this iteration even if the config asks for more.
    pub stop_after: Option<u32>,
}

impl<'a> LoopEnv<'a> {
    pub fn new(vocab: &'a Vocabulary, prompts: &'a [Vec<TokenId>], reference: &'a Parameters) -> Self {
        Self {
            vocab,
            prompts,
            reference,
            llm: None,
            run_dir: None,
            hook: None,
            stop_after: None,
        }
    }
}

pub struct RunOutcome {
    pub params: Parameters,
    pub optimizer: OptimizerState,
    pub pool: DataPool,
    pub manifest: RunManifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const POOL_FILE: &str = "pool.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_path(run_dir: &Path, k: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("iter_{k:03}.ckpt"))
}

pub fn optimizer_path(run_dir: &Path, k: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("iter_{k:03}.opt"))
}

/// Run all iterations from the reference model.
pub fn run(config: &LoopConfig, env: LoopEnv<'_>) -> Result<RunOutcome> {
    config.validate()?;
    let hash = content_hash(config);
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        profile: config.profile.clone(),
        config_hash: hash.clone(),
        base_params_hash: params_hash(env.reference),
        config: config.clone(),
        iterations: Vec::new(),
    };
    let state = RunOutcome {
        params: env.reference.clone(),
        optimizer: OptimizerState::new(env.reference, config.adam),
        pool: DataPool::new(Provenance {
            run_id: format!("{}-{}", config.profile, &hash[..12]),
            config_hash: hash,
        }),
        manifest,
    };
    if let Some(dir) = env.run_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| AltError::io(dir, e))?;
        // A fresh run starts a fresh training log.
        std::fs::write(dir.join(TRAIN_LOG_FILE), b"").map_err(|e| AltError::io(dir, e))?;
    }
    continue_run(config, env, state)
}

/// Continue the run recorded in `env.run_dir` from its last completed
/// iteration. Refuses when the config or reference model differ.
pub fn resume(config: &LoopConfig, env: LoopEnv<'_>) -> Result<RunOutcome> {
    config.validate()?;
    let dir = env
        .run_dir
        .ok_or_else(|| AltError::validation("resume needs a run directory"))?;
    let mut manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.config_hash != content_hash(config) {
        return Err(AltError::validation("config hash differs from the recorded run"));
    }
    if manifest.base_params_hash != params_hash(env.reference) {
        return Err(AltError::validation("reference model differs from the recorded run"));
    }
    let done = manifest.completed();
    let (params, optimizer) = if done == 0 {
        (env.reference.clone(), OptimizerState::new(env.reference, config.adam))
    } else {
        let p = load_checkpoint(&checkpoint_path(dir, done))?.params;
        let o = OptimizerState::load(&optimizer_path(dir, done), &p)?;
        (p, o)
    };
    let mut pool = if done == 0 {
        DataPool::new(Provenance {
            run_id: format!("{}-{}", config.profile, &manifest.config_hash[..12]),
            config_hash: manifest.config_hash.clone(),
        })
    } else {
        DataPool::load(&dir.join(POOL_FILE))?
    };
    // Drop anything an interrupted iteration may have left behind.
    let keep: Vec<PoolEntry> = pool.entries().iter().filter(|e| e.iteration <= done).cloned().collect();
    let provenance = pool.provenance.clone();
    pool = DataPool::new(provenance);
    pool.add_batch(keep)?;
    manifest.iterations.retain(|r| r.iteration <= done);
    continue_run(
        config,
        env,
        RunOutcome {
            params,
            optimizer,
            pool,
            manifest,
        },
    )
}

fn continue_run(config: &LoopConfig, mut env: LoopEnv<'_>, mut state: RunOutcome) -> Result<RunOutcome> {
    if env.prompts.is_empty() {
        return Err(AltError::validation("no prompts"));
    }
    if config.provider != ProviderKind::RewardQuantile && env.llm.is_none() {
        return Err(AltError::validation("this provider needs an LLM client"));
    }
    let budget = feedback_budget(config, &env, state.params.config.max_seq_len)?;
    let schedule = config.schedule();
    let last = env.stop_after.map_or(config.n_iterations, |s| s.min(config.n_iterations));
    for k in state.manifest.completed() + 1..=last {
        let mut record = run_iteration(config, &env, &mut state, k, &schedule, budget)?;
        if let Some(dir) = env.run_dir {
            let ck = checkpoint_path(dir, k);
            let op = optimizer_path(dir, k);
            save_checkpoint(&ck, &state.params, state.optimizer.t)?;
            state.optimizer.save(&op)?;
            state.pool.save(&dir.join(POOL_FILE))?;
            record.checkpoint = Some(relative(dir, &ck));
            record.optimizer = Some(relative(dir, &op));
        }
        if let Some(hook) = env.hook.as_mut() {
            record.eval = Some(hook(k, &state.params)?);
        }
        log::info!(
            "iteration {k}: {} samples, {} selected, mean score {:.4}, loss {:?}",
            record.samples,
            record.selected,
            record.mean_sample_score,
            record.train.mean_loss
        );
        state.manifest.iterations.push(record);
        if let Some(dir) = env.run_dir {
            state.manifest.save(&dir.join(MANIFEST_FILE))?;
        }
    }
    Ok(state)
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

/// Annotation of one sample; `None` when it was dropped.
enum Annotation {
    Kept(PoolFeedback, Option<f64>),
    Unparseable,
    Unencodable,
}

fn run_iteration(
    config: &LoopConfig,
    env: &LoopEnv<'_>,
    state: &mut RunOutcome,
    k: u32,
    schedule: &ScheduleConfig,
    budget: usize,
) -> Result<IterationRecord> {
    let vocab = env.vocab;
    let eos = vocab.special().eos;
    let sep = vocab.special().separator;
    let (q, g) = (config.prompts_per_iteration, config.generations_per_prompt);
    let seed = config.seed;

    let mut draw = Rng::new(derive_seed(seed, &[tag("prompts"), k as u64]));
    let slots: Vec<usize> = (0..q).map(|_| draw.below(env.prompts.len())).collect();

    // Sampling context per slot: the bare prompt at k = 1, exemplar feedback
    // plus separator before it afterwards.
    let exemplars = exemplar_texts(config, &state.pool, k);
    let exemplar_for_slot: Vec<Option<String>> = (0..q)
        .map(|s| {
            (!exemplars.is_empty()).then(|| {
                let mut r = Rng::new(derive_seed(seed, &[tag("exemplar"), k as u64, s as u64]));
                exemplars[r.below(exemplars.len())].clone()
            })
        })
        .collect();
    let prefixes: Vec<Vec<TokenId>> = exemplar_for_slot
        .iter()
        .map(|t| -> Result<Vec<TokenId>> {
            match t {
                None => Ok(Vec::new()),
                Some(text) => {
                    let label = FeedbackLabel::new(text.clone(), config.scheme.position(text));
                    let mut toks = feedback_tokens(&label, config.scheme.encoding, vocab)?;
                    toks.push(sep);
                    Ok(toks)
                }
            }
        })
        .collect::<Result<_>>()?;

    let samples: Vec<Vec<SampleOutput>> = slots
        .par_iter()
        .enumerate()
        .map(|(s, &pi)| {
            let mut ctx = prefixes[s].clone();
            ctx.extend_from_slice(&env.prompts[pi]);
            let seeds: Vec<u64> = (0..g)
                .map(|j| derive_seed(seed, &[tag("sample"), k as u64, s as u64, j as u64]))
                .collect();
            sample_many(&state.params, &ctx, &config.sampler, &seeds, eos)
        })
        .collect::<Result<_>>()?;

    let annotations = annotate(config, env, &slots, &samples, budget)?;

    let mut record = IterationRecord {
        iteration: k,
        samples: q * g,
        exemplars: {
            let mut e: Vec<String> = exemplar_for_slot.iter().flatten().cloned().collect();
            e.sort();
            e.dedup();
            e
        },
        ..IterationRecord::default()
    };
    let mut total_score = 0.0;
    let mut total_len = 0usize;
    let mut new_entries = Vec::new();
    for (s, (&pi, outs)) in slots.iter().zip(&samples).enumerate() {
        let mut slot_entries = Vec::new();
        for (j, out) in outs.iter().enumerate() {
            total_score += toxicity_score(vocab, &out.tokens);
            total_len += out.tokens.len();
            match &annotations[s][j] {
                Annotation::Unparseable => record.unparseable += 1,
                Annotation::Unencodable => record.unencodable += 1,
                Annotation::Kept(fb, reward) => {
                    record.annotated += 1;
                    record.truncated += usize::from(out.truncated);
                    if let Some(c) = fb.category {
                        *record.category_histogram.entry(c).or_default() += 1;
                    }
                    slot_entries.push(PoolEntry {
                        prompt: env.prompts[pi].clone(),
                        generation: out.tokens.clone(),
                        feedback: fb.clone(),
                        reward: *reward,
                        iteration: k,
                        truncated: out.truncated,
                        selected: false,
                    });
                }
            }
        }
        let candidates: Vec<usize> = (0..slot_entries.len())
            .filter(|&i| !(config.filter_truncated && slot_entries[i].truncated))
            .collect();
        if candidates.is_empty() && !slot_entries.is_empty() {
            log::warn!("iteration {k}, slot {s}: every generation truncated; nothing to train on");
        }
        let pool_view: Vec<PoolEntry> = candidates.iter().map(|&i| slot_entries[i].clone()).collect();
        let pick = balanced_indices(
            &pool_view,
            config.train_per_category,
            derive_seed(seed, &[tag("select"), k as u64, s as u64]),
        );
        for i in pick {
            slot_entries[candidates[i]].selected = true;
        }
        new_entries.extend(slot_entries);
    }
    record.mean_sample_score = total_score / (q * g) as f64;
    record.mean_sample_length = total_len as f64 / (q * g) as f64;
    state.pool.add_batch(new_entries)?;
    record.pool_size = state.pool.len();

    let training: Vec<&PoolEntry> = state
        .pool
        .selected(if config.replay_selections { None } else { Some(k) });
    record.selected = state.pool.selected(Some(k)).len();
    let max_len = state.params.config.max_seq_len;
    let rows: Vec<TrainRow> = training
        .iter()
        .enumerate()
        .map(|(i, e)| {
            build_training_sequence(Some(&e.feedback.label()), &e.prompt, &e.generation, config.scheme.encoding, vocab, max_len)
                .map_err(|err| AltError::validation(format!("iteration {k}, training sample {i}: {err}")))
        })
        .collect::<Result<_>>()?;

    if rows.is_empty() {
        log::warn!("iteration {k}: no training rows");
        record.train = TrainSummary::default();
        return Ok(record);
    }
    let options = TrainOptions {
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: derive_seed(seed, &[tag("train"), k as u64]),
        pad: vocab.special().pad,
    };
    let reference = (config.loss.beta > 0.0).then_some(env.reference);
    let mut log_buf = Vec::new();
    let report = train_iteration(
        &mut state.params,
        reference,
        &rows,
        &config.loss,
        &mut state.optimizer,
        schedule,
        &options,
        Some(&mut log_buf),
    )?;
    if let Some(dir) = env.run_dir {
        let path = dir.join(TRAIN_LOG_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| AltError::io(&path, e))?;
        f.write_all(&log_buf).map_err(|e| AltError::io(&path, e))?;
    }
    let n = report.steps.len() as f64;
    let mean = |f: fn(&crate::trainer::StepMetrics) -> f64| (n > 0.0).then(|| report.steps.iter().map(f).sum::<f64>() / n);
    record.train = TrainSummary {
        rows: rows.len(),
        steps: report.steps.len(),
        mean_loss: mean(|s| s.loss),
        mean_nll: mean(|s| s.nll),
        mean_kl: mean(|s| s.kl),
        mean_entropy: mean(|s| s.entropy),
        last_lr: report.steps.last().map(|s| s.lr),
    };
    Ok(record)
}

/// Feedback texts to condition on at iteration `k`; empty at `k = 1`.
fn exemplar_texts(config: &LoopConfig, pool: &DataPool, k: u32) -> Vec<String> {
    if k == 1 {
        return Vec::new();
    }
    if config.provider != ProviderKind::LlmUnconstrained {
        return vec![config.exemplar_feedback.clone()];
    }
    let mut texts: Vec<String> = Vec::new();
    for e in pool.entries() {
        if e.iteration < k && e.feedback.score == Some(crate::feedback::UnconstrainedFeedback::MAX_SCORE) && !texts.contains(&e.feedback.text) {
            texts.push(e.feedback.text.clone());
        }
    }
    if texts.is_empty() {
        texts.push(config.exemplar_feedback.clone());
    }
    texts
}

/// Longest feedback block that still fits the model next to the longest
/// prompt and a full generation. Fixed label sets must fit entirely.
fn feedback_budget(config: &LoopConfig, env: &LoopEnv<'_>, max_seq_len: usize) -> Result<usize> {
    let prompt = env.prompts.iter().map(Vec::len).max().unwrap_or(0);
    let rest = prompt + config.sampler.max_new_tokens + 1;
    let budget = max_seq_len.saturating_sub(rest);
    let mut texts: Vec<&str> = vec![&config.exemplar_feedback];
    if config.provider != ProviderKind::LlmUnconstrained {
        texts.extend(config.scheme.labels.iter().map(|l| l.text.as_str()));
    }
    for text in texts {
        let label = FeedbackLabel::new(text, config.scheme.position(text));
        let n = feedback_tokens(&label, config.scheme.encoding, env.vocab)?.len();
        if n > budget {
            return Err(AltError::validation(format!(
                "feedback {text:?} ({n} tokens) plus prompt {prompt} and {} new tokens exceeds max_seq_len {max_seq_len}",
                config.sampler.max_new_tokens
            )));
        }
    }
    Ok(budget)
}

fn annotate(
    config: &LoopConfig,
    env: &LoopEnv<'_>,
    slots: &[usize],
    samples: &[Vec<SampleOutput>],
    budget: usize,
) -> Result<Vec<Vec<Annotation>>> {
    let vocab = env.vocab;
    match config.provider {
        ProviderKind::RewardQuantile => samples
            .iter()
            .map(|outs| {
                let rewards: Vec<f64> = outs.iter().map(|o| -toxicity_score(vocab, &o.tokens)).collect();
                let cats = map_rewards_to_quantiles(&rewards, config.scheme.k)?;
                cats.iter()
                    .zip(&rewards)
                    .map(|(&c, &r)| Ok(Annotation::Kept(label_for_category(&config.scheme, c)?.into(), Some(r))))
                    .collect()
            })
            .collect(),
        ProviderKind::LlmCategorical | ProviderKind::LlmUnconstrained => {
            let client = env.llm.expect("checked by caller");
            let template = config.template_id.as_deref().expect("validated");
            let eos = vocab.special().eos;
            let jobs: Vec<(usize, usize)> = samples
                .iter()
                .enumerate()
                .flat_map(|(s, outs)| (0..outs.len()).map(move |j| (s, j)))
                .collect();
            let results = client.map_concurrent(&jobs, |&(s, j)| -> Result<Annotation> {
                let prompt = vocab.decode(&env.prompts[slots[s]]);
                let toks = &samples[s][j].tokens;
                let body = toks.strip_suffix(&[eos]).unwrap_or(toks);
                let generation = vocab.decode(body);
                let fb: PoolFeedback = match config.provider {
                    ProviderKind::LlmCategorical => {
                        match llm_categorical(client, template, &prompt, &generation, &config.scheme.labels) {
                            Ok(l) => l.into(),
                            Err(AltError::Unparseable(m)) => {
                                log::debug!("unparseable feedback: {m}");
                                return Ok(Annotation::Unparseable);
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    _ => match llm_unconstrained(client, template, &prompt, &generation) {
                        Ok(f) => f.into(),
                        Err(AltError::Unparseable(m)) => {
                            log::debug!("unparseable feedback: {m}");
                            return Ok(Annotation::Unparseable);
                        }
                        Err(e) => return Err(e),
                    },
                };
                match feedback_tokens(&fb.label(), config.scheme.encoding, vocab) {
                    Ok(t) if t.len() <= budget => {}
                    _ => return Ok(Annotation::Unencodable),
                }
                Ok(Annotation::Kept(fb, None))
            });
            let mut flat = results.into_iter();
            samples
                .iter()
                .map(|outs| (0..outs.len()).map(|_| flat.next().expect("one result per job")).collect())
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::feedback::{scheme_control_words, steerlm_linearize, ChatRequest, ClientConfig, TemplateRegistry};
    use crate::model::{init_params, ModelConfig};
    use crate::vocab::build_vocabulary;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["sun", "tree", "river", "stone"], &["vile", "rotten"], 5)
            .unwrap()
            .with_control_words(&scheme_control_words())
            .unwrap()
    }

    fn model(v: &Vocabulary) -> Parameters {
        init_params(
            &ModelConfig {
                vocab_size: v.len(),
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 24,
                dropout: 0.0,
            },
            11,
        )
        .unwrap()
    }

    fn prompts(v: &Vocabulary) -> Vec<Vec<TokenId>> {
        ["sun tree", "river vile stone", "stone"]
            .iter()
            .map(|p| v.encode(p).unwrap())
            .collect()
    }

    fn small(profile: &str) -> LoopConfig {
        let mut c = variant_profile(profile).unwrap();
        c.n_iterations = 3;
        c.prompts_per_iteration = 2;
        c.generations_per_prompt = 3;
        c.train_per_category = 1;
        c.sampler.max_new_tokens = 5;
        c.sampler.min_new_tokens = c.sampler.min_new_tokens.min(5);
        c.batch_size = 2;
        c.epochs = 1;
        c
    }

    #[test]
    fn first_iteration_fills_the_pool() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let mut cfg = small("alt_rm");
        cfg.filter_truncated = true;
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.stop_after = Some(1);
        let out = run(&cfg, env).unwrap();
        assert_eq!(out.pool.len(), 6);
        assert!(out.pool.entries().iter().all(|e| e.iteration == 1 && e.reward.is_some()));
        let rec = &out.manifest.iterations[0];
        assert_eq!(rec.samples, 6);
        assert!(rec.exemplars.is_empty());
        // One per category per slot at most, never a truncated sample.
        for e in out.pool.selected(Some(1)) {
            assert!(!e.truncated);
        }
        assert!(rec.selected <= 2 * 5);

        // Without the filter every slot yields one sample per category.
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.stop_after = Some(1);
        let out = run(&small("alt_rm"), env).unwrap();
        assert_eq!(out.manifest.iterations[0].selected, 2 * 3);
    }

    #[test]
    fn later_iterations_condition_on_the_exemplar() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let out = run(&small("alt_rm"), LoopEnv::new(&v, &ps, &p)).unwrap();
        assert_eq!(out.manifest.iterations.len(), 3);
        assert!(out.manifest.iterations[0].exemplars.is_empty());
        for r in &out.manifest.iterations[1..] {
            assert_eq!(r.exemplars, vec!["Lowest Toxicity".to_string()]);
        }
        assert!(out.manifest.iterations.iter().any(|r| r.train.steps > 0));
        assert_ne!(params_hash(&out.params), params_hash(&p));
    }

    #[test]
    fn runs_are_reproducible() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let a = run(&small("quark"), LoopEnv::new(&v, &ps, &p)).unwrap();
        let b = run(&small("quark"), LoopEnv::new(&v, &ps, &p)).unwrap();
        assert_eq!(params_hash(&a.params), params_hash(&b.params));
        assert_eq!(a.pool, b.pool);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let cfg = small("alt_rm");
        let full_dir = tempfile::tempdir().unwrap();
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(full_dir.path());
        let full = run(&cfg, env).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(dir.path());
        env.stop_after = Some(2);
        run(&cfg, env).unwrap();
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(dir.path());
        let resumed = resume(&cfg, env).unwrap();

        assert_eq!(params_hash(&full.params), params_hash(&resumed.params));
        assert_eq!(full.pool, resumed.pool);
        assert_eq!(full.manifest, resumed.manifest);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(full_dir.path(), POOL_FILE), read(dir.path(), POOL_FILE));
        assert_eq!(read(full_dir.path(), TRAIN_LOG_FILE), read(dir.path(), TRAIN_LOG_FILE));
        assert_eq!(
            std::fs::read(checkpoint_path(full_dir.path(), 3)).unwrap(),
            std::fs::read(checkpoint_path(dir.path(), 3)).unwrap()
        );

        // Nothing left to do.
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(dir.path());
        let again = resume(&cfg, env).unwrap();
        assert_eq!(again.manifest.iterations.len(), 3);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let dir = tempfile::tempdir().unwrap();
        let cfg = small("alt_rm");
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(dir.path());
        env.stop_after = Some(1);
        run(&cfg, env).unwrap();
        let mut other = cfg.clone();
        other.seed = 9;
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.run_dir = Some(dir.path());
        let err = resume(&other, env).err().unwrap();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn quark_uses_one_feedback_token() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let cfg = small("quark");
        assert_eq!(cfg.scheme.encoding, Encoding::QuantileToken);
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.stop_after = Some(1);
        let out = run(&cfg, env).unwrap();
        for e in out.pool.entries() {
            let toks = feedback_tokens(&e.feedback.label(), Encoding::QuantileToken, &v).unwrap();
            assert_eq!(toks, vec![v.special().quantile[e.category().unwrap()]]);
        }
    }

    #[test]
    fn profile_presets() {
        assert_eq!(variant_profile("alt_rm").unwrap().exemplar_feedback, "Lowest Toxicity");
        let s = variant_profile("steerlm").unwrap();
        assert_eq!(s.loss.beta, 0.0);
        assert_eq!(steerlm_linearize(&s.scheme.best()).unwrap(), "harmful:0,helpful:2");
        let lmc = variant_profile("alt_lmc").unwrap();
        assert_eq!(lmc.exemplar_feedback, "Harmless and very helpful");
        assert_eq!((lmc.loss.beta, lmc.loss.alpha), (0.0, 0.06));
        assert_eq!(variant_profile("alt_lmu").unwrap().provider, ProviderKind::LlmUnconstrained);
        let err = variant_profile("nope").unwrap_err().to_string();
        assert!(err.contains("quark") && err.contains("alt_lmu"));
        for p in PROFILES {
            variant_profile(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn schedule_estimate_bounds_the_steps() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let cfg = small("alt_rm");
        let out = run(&cfg, LoopEnv::new(&v, &ps, &p)).unwrap();
        let steps: usize = out.manifest.iterations.iter().map(|r| r.train.steps).sum();
        assert!(steps as u64 <= cfg.estimated_total_steps());
    }

    fn judge(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> LlmClient {
        let transport = move |r: &ChatRequest| -> Result<String> { Ok(reply(r.user_content())) };
        LlmClient::new(
            ClientConfig {
                backoff_ms: 0,
                concurrency: 2,
                ..ClientConfig::default()
            },
            TemplateRegistry::builtin(),
            Arc::new(transport),
        )
    }

    #[test]
    fn categorical_llm_counts_unparseable_replies() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let client = judge(|content| {
            if content.contains("vile") || content.contains("rotten") {
                "Harmful".into()
            } else if content.len() % 2 == 0 {
                "Harmless and very helpful".into()
            } else {
                "I cannot decide".into()
            }
        });
        let cfg = small("alt_lmc");
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.llm = Some(&client);
        let out = run(&cfg, env).unwrap();
        for r in &out.manifest.iterations {
            assert_eq!(r.annotated + r.unparseable + r.unencodable, r.samples);
        }
        let total: usize = out.manifest.iterations.iter().map(|r| r.unparseable).sum();
        assert!(total > 0);
        assert_eq!(out.pool.len(), out.manifest.iterations.iter().map(|r| r.annotated).sum::<usize>());
    }

    #[test]
    fn unconstrained_exemplars_come_from_top_scores() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let client = judge(|content| {
            let score = if content.contains("vile") { 0 } else { 3 };
            let fb = if score == 3 { "Excellent" } else { "Horrible" };
            format!("<analysis>ok</analysis><feedback>{fb}</feedback><score>{score}</score>")
        });
        let cfg = small("alt_lmu");
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.llm = Some(&client);
        let out = run(&cfg, env).unwrap();
        for r in &out.manifest.iterations[1..] {
            assert!(r.exemplars.iter().all(|e| e == "Excellent"));
        }
    }

    #[test]
    fn llm_provider_needs_a_client() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        assert!(run(&small("alt_lmc"), LoopEnv::new(&v, &ps, &p)).is_err());
    }

    #[test]
    fn plot_data_has_one_row_per_iteration() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let mut env = LoopEnv::new(&v, &ps, &p);
        env.hook = Some(Box::new(|k, _| Ok(serde_json::json!({"k": k}))));
        let out = run(&small("alt_rm"), env).unwrap();
        let csv = out.manifest.plot_data();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].ends_with("eval_k"));
        assert!(lines[3].ends_with(",3"));
    }

    #[test]
    fn labels_must_fit_the_context_window() {
        let v = vocab();
        let p = model(&v);
        let ps = prompts(&v);
        let mut cfg = small("alt_rm");
        cfg.sampler.max_new_tokens = p.config.max_seq_len;
        let err = run(&cfg, LoopEnv::new(&v, &ps, &p)).err().expect("rejected");
        assert!(err.to_string().contains("max_seq_len"), "{err}");
    }
}
