use std::path::{Path, PathBuf};

use alt_core::alt_loop::{variant_profile, RunManifest, MANIFEST_FILE, PROFILES};
use alt_core::config::RunConfig;
use alt_core::eval::{evaluate, steerability_probe, EvalConfig, EvalReport};
use alt_core::feedback::{FeedbackLabel, QuantileScheme};
use alt_core::model::{inspect_checkpoint, load_checkpoint, Parameters};
use alt_core::pipeline::{align_in, pretrain_into, Dataset, RunDir};
use alt_core::pool::DataPool;
use alt_core::vocab::Vocabulary;
use alt_core::{AltError, Result};

use crate::{CheckpointAction, Cli, Command, ConfigArgs, PoolAction};

pub fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Pretrain {
            config,
            run_dir,
            runs_root,
        } => pretrain(&config, run_dir, &runs_root),
        Command::Align {
            run_dir,
            config,
            resume,
            track_samples,
        } => align(&RunDir::new(run_dir), &config, resume, track_samples, workers),
        Command::Eval {
            run_dir,
            checkpoint,
            label,
            profile,
            samples_per_prompt,
            dist_denominator,
            seed,
            out,
            plot_data,
        } => {
            if let Some(p) = plot_data {
                return plot(&p, out.as_deref());
            }
            let run_dir = run_dir.ok_or_else(|| AltError::validation("eval needs --run-dir (or --plot-data)"))?;
            let mut overrides = EvalOverrides {
                samples_per_prompt,
                seed,
                dist_denominator: dist_denominator.map(Into::into),
            };
            eval(
                &RunDir::new(run_dir),
                checkpoint.as_deref(),
                label.as_deref(),
                profile.as_deref(),
                &mut overrides,
                out,
            )
        }
        Command::SteerProbe {
            run_dir,
            checkpoint,
            profile,
            samples_per_prompt,
            labels,
            compare,
        } => steer_probe(
            &RunDir::new(run_dir),
            &checkpoint,
            profile.as_deref(),
            samples_per_prompt,
            labels,
            compare,
        ),
        Command::Pool { action } => match action {
            PoolAction::Inspect {
                pool,
                vocab,
                iteration,
                limit,
            } => pool_inspect(&pool, vocab.as_deref(), iteration, limit),
            PoolAction::Stats { pool } => {
                let p = DataPool::load(&pool)?;
                println!("{}", serde_json::to_string_pretty(&p.stats()).expect("stats serialize"));
                Ok(())
            }
        },
        Command::Checkpoint {
            action: CheckpointAction::Inspect { checkpoint },
        } => checkpoint_inspect(&checkpoint),
        Command::Profiles => {
            for p in PROFILES {
                let c = variant_profile(p)?;
                println!("{p}\tprovider={:?}\tencoding={:?}", c.provider, c.scheme.encoding);
            }
            Ok(())
        }
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| AltError::validation("--config is required"))?;
    RunConfig::load(path, args.profile.as_deref(), &args.overrides)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AltError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| AltError::io(path, e))
}

fn pretrain(args: &ConfigArgs, run_dir: Option<PathBuf>, runs_root: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let dir = match run_dir {
        Some(d) => RunDir::new(d),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
            RunDir::named(runs_root, &stamp, &cfg.hash())
        }
    };
    if dir.base_checkpoint().exists() {
        return Err(AltError::validation(format!(
            "{} already holds a base model",
            dir.root.display()
        )));
    }
    let (_, _, report) = pretrain_into(&cfg, &dir)?;
    println!("run directory: {}", dir.root.display());
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.train_perplexity >= report.unigram_perplexity {
        log::warn!(
            "corpus perplexity {:.3} did not beat the unigram baseline {:.3}",
            report.train_perplexity,
            report.unigram_perplexity
        );
    }
    Ok(())
}

/// The data-defining blocks must match the ones the base model was trained on.
fn check_compatible(base: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let same = base.vocab == cfg.vocab
        && base.corpus == cfg.corpus
        && base.heldout_documents == cfg.heldout_documents
        && base.model == cfg.model;
    if same {
        Ok(())
    } else {
        Err(AltError::validation(
            "vocab, corpus, heldout_documents and model must match the run's pretraining config",
        ))
    }
}

fn exemplar(cfg: &RunConfig) -> FeedbackLabel {
    let text = &cfg.loop_.exemplar_feedback;
    FeedbackLabel::new(text.clone(), cfg.loop_.scheme.position(text))
}

fn align(dir: &RunDir, args: &ConfigArgs, resume: bool, track_samples: usize, workers: Option<usize>) -> Result<()> {
    let base_cfg = dir.load_config()?;
    let mut cfg = match &args.config {
        Some(_) => resolve(args)?,
        None => {
            let path = dir.config();
            RunDir::require(&path)?;
            let text = std::fs::read_to_string(&path).map_err(|e| AltError::io(&path, e))?;
            RunConfig::rebase(&text, args.profile.as_deref(), &args.overrides)?
        }
    };
    check_compatible(&base_cfg, &cfg)?;
    if let (Some(w), Some(p)) = (workers, cfg.provider.as_mut()) {
        p.client.concurrency = p.client.concurrency.min(w);
    }
    let data = Dataset::prepare(&cfg)?;
    let base = dir.load_base()?;
    let align_dir = dir.align(&cfg.profile);
    write(&align_dir.join("config.toml"), &cfg.to_toml())?;

    let hook: Option<alt_core::alt_loop::IterationHook<'_>> = if track_samples > 0 {
        let prompts = data.eval_prompts(&cfg.corpus)?;
        let eval_cfg = EvalConfig {
            samples_per_prompt: track_samples,
            ..cfg.eval.clone()
        };
        let label = exemplar(&cfg);
        let scheme = cfg.loop_.scheme.clone();
        let vocab = data.vocab.clone();
        let reference = base.clone();
        Some(Box::new(move |_, params: &Parameters| {
            let r = evaluate(params, &reference, &vocab, &prompts, Some((&label, &scheme)), &eval_cfg)?;
            Ok(serde_json::json!({
                "avg_max_score": r.avg_max_score,
                "mean_score": r.mean_score,
                "toxic_probability": r.toxic_probability,
                "perplexity": r.perplexity,
            }))
        }))
    } else {
        None
    };
    let out = align_in(&cfg, dir, &data, &base, resume, hook)?;
    println!("align directory: {}", align_dir.display());
    for r in &out.manifest.iterations {
        println!(
            "iteration {:>3}: samples {} selected {} unparseable {} mean score {:.4} loss {}",
            r.iteration,
            r.samples,
            r.selected,
            r.unparseable,
            r.mean_sample_score,
            r.train.mean_loss.map_or("-".to_string(), |l| format!("{l:.4}"))
        );
    }
    Ok(())
}

/// Config of the align run a checkpoint belongs to, else the run's own.
fn config_for(dir: &RunDir, checkpoint: Option<&Path>) -> Result<RunConfig> {
    if let Some(ck) = checkpoint {
        for anc in ck.ancestors().skip(1).take(3) {
            let candidate = anc.join("config.toml");
            if candidate.exists() && anc != dir.root.as_path() {
                return RunConfig::load(&candidate, None, &[]);
            }
        }
    }
    dir.load_config()
}

fn scheme_for(cfg: &RunConfig, profile: Option<&str>) -> Result<QuantileScheme> {
    match profile {
        Some(p) => Ok(variant_profile(p)?.scheme),
        None => Ok(cfg.loop_.scheme.clone()),
    }
}

fn load_params(path: &Path) -> Result<Parameters> {
    RunDir::require(path)?;
    Ok(load_checkpoint(path)?.params)
}

struct EvalOverrides {
    samples_per_prompt: Option<usize>,
    seed: Option<u64>,
    dist_denominator: Option<alt_core::eval::DistDenominator>,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn eval(
    dir: &RunDir,
    checkpoint: Option<&Path>,
    label: Option<&str>,
    profile: Option<&str>,
    o: &mut EvalOverrides,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = config_for(dir, checkpoint)?;
    let scheme = scheme_for(&cfg, profile)?;
    let data = Dataset::prepare(&cfg)?;
    let prompts = data.eval_prompts(&cfg.corpus)?;
    let base = dir.load_base()?;
    let policy = match checkpoint {
        Some(p) => load_params(p)?,
        None => base.clone(),
    };
    let mut eval_cfg = cfg.eval.clone();
    if let Some(n) = o.samples_per_prompt {
        eval_cfg.samples_per_prompt = n;
    }
    if let Some(s) = o.seed {
        eval_cfg.sampler.seed = s;
    }
    if let Some(d) = o.dist_denominator.take() {
        eval_cfg.dist_denominator = d;
    }
    let label = label.map(|t| FeedbackLabel::new(t, scheme.position(t)));
    let report = evaluate(&policy, &base, &data.vocab, &prompts, label.as_ref().map(|l| (l, &scheme)), &eval_cfg)?;
    let out = out.unwrap_or_else(|| {
        let stem = checkpoint
            .and_then(|p| p.file_stem())
            .map_or("base".to_string(), |s| s.to_string_lossy().into_owned());
        let name = match &label {
            Some(l) => format!("{stem}__{}", slug(&l.text)),
            None => stem,
        };
        dir.eval_dir().join(format!("{name}.json"))
    });
    write(&out, &(report.to_json() + "\n"))?;
    write(&out.with_extension("csv"), &report.to_csv())?;
    print_summary(&report);
    println!("report: {}", out.display());
    Ok(())
}

fn print_summary(r: &EvalReport) {
    println!("prompts            {}", r.prompts);
    println!("avg_max_score      {:.6}", r.avg_max_score);
    println!("mean_score         {:.6}", r.mean_score);
    println!("toxic_probability  {:.6}", r.toxic_probability);
    for (n, v) in &r.dist {
        println!("dist_{n}             {}", v.map_or("null".into(), |x| format!("{x:.6}")));
    }
    println!("perplexity         {}", r.perplexity.map_or("null".into(), |x| format!("{x:.6}")));
    println!("mean_length        {:.3}", r.mean_length);
    println!("truncation_rate    {:.3}", r.truncation_rate);
}

fn plot(path: &Path, out: Option<&Path>) -> Result<()> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    RunDir::require(&manifest_path)?;
    let csv = RunManifest::load(&manifest_path)?.plot_data();
    match out {
        Some(o) => write(o, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn steer_probe(
    dir: &RunDir,
    checkpoint: &Path,
    profile: Option<&str>,
    samples_per_prompt: usize,
    labels: Vec<String>,
    compare: bool,
) -> Result<()> {
    let cfg = config_for(dir, Some(checkpoint))?;
    let scheme = scheme_for(&cfg, profile)?;
    let data = Dataset::prepare(&cfg)?;
    let prompts = data.eval_prompts(&cfg.corpus)?;
    let policy = load_params(checkpoint)?;
    let labels = if labels.is_empty() {
        scheme.labels.iter().map(|l| l.text.clone()).collect()
    } else {
        labels
    };
    let report = steerability_probe(&policy, &data.vocab, &prompts, &scheme, &labels, &cfg.eval.sampler, samples_per_prompt)?;
    for l in &report.labels {
        println!("{:<28}{:.6}", l.label, l.mean_score);
    }
    if compare {
        if labels.len() < 2 {
            return Err(AltError::validation("--compare needs at least two labels"));
        }
        let t = report.compare(&labels[0], &labels[1])?;
        println!(
            "{} > {}: t = {:.4}, df = {}, one-tailed p = {:.3e}{}",
            labels[0],
            labels[1],
            t.t,
            t.df,
            t.p_value,
            if t.degenerate { " (zero variance)" } else { "" }
        );
    }
    let stem = checkpoint.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    let out = dir.eval_dir().join(format!("probe__{stem}.json"));
    write(&out, &(serde_json::to_string_pretty(&report).expect("probe serializes") + "\n"))?;
    println!("report: {}", out.display());
    Ok(())
}

fn pool_inspect(path: &Path, vocab: Option<&Path>, iteration: Option<u32>, limit: usize) -> Result<()> {
    let pool = DataPool::load(path)?;
    // Pools written by `align` sit two levels below the run's vocabulary.
    let guessed = path.ancestors().nth(3).map(|d| d.join("vocab.json"));
    let vocab: Option<Vocabulary> = match vocab {
        Some(v) => Some(Vocabulary::load(v)?),
        None => match guessed.filter(|g| g.exists()) {
            Some(g) => Some(Vocabulary::load(&g)?),
            None => None,
        },
    };
    let shown = pool
        .entries()
        .iter()
        .filter(|e| iteration.is_none_or(|k| e.iteration == k))
        .take(limit);
    for e in shown {
        let text = |ids: &[u32]| match &vocab {
            Some(v) => serde_json::Value::String(v.decode(ids)),
            None => serde_json::json!(ids),
        };
        let line = serde_json::json!({
            "iteration": e.iteration,
            "feedback": e.feedback.text,
            "category": e.feedback.category,
            "reward": e.reward,
            "selected": e.selected,
            "truncated": e.truncated,
            "prompt": text(&e.prompt),
            "generation": text(&e.generation),
        });
        println!("{line}");
    }
    Ok(())
}

fn checkpoint_inspect(path: &Path) -> Result<()> {
    RunDir::require(path)?;
    let (config, step, tensors) = inspect_checkpoint(path)?;
    println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
    println!("step {step}");
    let total: usize = tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    println!("{} tensors, {total} parameters", tensors.len());
    for t in &tensors {
        println!("{:<28}{:<14}l2 {:<14.6}max|x| {:.6}", t.name, format!("{:?}", t.shape), t.l2_norm, t.max_abs);
    }
    Ok(())
}
