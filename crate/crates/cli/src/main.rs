//! `alt`: pretrain, align, evaluate and inspect desk-scale runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use alt_core::eval::DistDenominator;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "alt", version, about = "Feedback-conditioned alignment of a small language model")]
struct Cli {
    /// Cap on worker threads for sampling, training and annotation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loop profile; overrides the file.
    #[arg(long)]
    profile: Option<String>,
    /// `dotted.key=value` override, applied last (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the corpus and train the base model.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `<runs-root>/<timestamp>-<config hash>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs_root: PathBuf,
    },
    /// Run the sample/annotate/train loop from the base model of a run.
    Align {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue an interrupted run of the same configuration.
        #[arg(long)]
        resume: bool,
        /// After every iteration, evaluate on the held-out prompts with this
        /// many samples per prompt and record it in the manifest (0 = off).
        #[arg(long, default_value_t = 0)]
        track_samples: usize,
    },
    /// Evaluate a checkpoint on the held-out prompts.
    Eval {
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Checkpoint to evaluate; defaults to the base model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feedback text to condition on; unconditioned when absent.
        #[arg(long)]
        label: Option<String>,
        /// Profile whose feedback scheme encodes `--label`; defaults to the run's.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        samples_per_prompt: Option<usize>,
        #[arg(long, value_enum)]
        dist_denominator: Option<DenominatorArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path (JSON); a CSV is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the per-iteration series of an align run (directory or
        /// manifest) as CSV instead of evaluating.
        #[arg(long, value_name = "ALIGN_RUN")]
        plot_data: Option<PathBuf>,
    },
    /// Mean oracle score under each feedback label of the scheme.
    SteerProbe {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, default_value_t = 5)]
        samples_per_prompt: usize,
        /// Labels to probe; all labels of the scheme by default.
        #[arg(long = "label")]
        labels: Vec<String>,
        /// Print a one-tailed test of the first label over the second.
        #[arg(long)]
        compare: bool,
    },
    /// Inspect a sample pool.
    Pool {
        #[command(subcommand)]
        action: PoolAction,
    },
    /// Inspect a checkpoint.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointAction,
    },
    /// List the loop profiles.
    Profiles,
}

#[derive(Subcommand, Debug)]
enum PoolAction {
    /// Print entries, decoded when a vocabulary is given.
    Inspect {
        pool: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        iteration: Option<u32>,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Per-iteration counts and category histograms as JSON.
    Stats { pool: PathBuf },
}

#[derive(Subcommand, Debug)]
enum CheckpointAction {
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DenominatorArg {
    Ngrams,
    Tokens,
}

impl From<DenominatorArg> for DistDenominator {
    fn from(d: DenominatorArg) -> Self {
        match d {
            DenominatorArg::Ngrams => DistDenominator::Ngrams,
            DenominatorArg::Tokens => DistDenominator::Tokens,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
