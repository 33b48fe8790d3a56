//! `slavtag`: prepare corpora, train, predict, evaluate and self-check.

/// `println!` through [`emit`].
macro_rules! say {
    ($($t:tt)*) => {
        $crate::emit(&format!("{}\n", format_args!($($t)*)))
    };
}

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{Failure, Result};

/// Multilingual named entity tagger.
#[derive(Parser, Debug)]
#[command(name = "slavtag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a corpus into a tagged-sentence cache.
    Prepare(PrepareArgs),
    /// Write a generated multilingual corpus and its subword vocabulary.
    Synth(SynthArgs),
    /// Train a model on prepared caches.
    Train(TrainArgs),
    /// Tag a prepared cache with a trained model.
    Predict(PredictArgs),
    /// Score predictions against gold data.
    Eval(EvalArgs),
    /// Run the built-in numeric and round-trip checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Corpus root laid out as <topic>/<language>/{raw/<id>.txt, ann/<id>.ann}.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Subword vocabulary, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output cache directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Subtoken limit per sentence, including [CLS].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Configuration file (languages and data.max_len are used).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output corpus root.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the vocabulary.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    #[arg(long, default_value = "brexit")]
    pub topic: String,
    #[arg(long, default_value_t = 4)]
    pub docs_per_language: usize,
    #[arg(long, default_value_t = 5)]
    pub sentences_per_doc: usize,
}

/// Where layered embeddings come from. Exactly one may be given.
#[derive(Args, Debug, Clone)]
#[group(multiple = false)]
pub struct EmbeddingArgs {
    /// Directory of LEMB files laid out as <topic>/<language>/<id>.<sentence>.lemb.
    #[arg(long, value_name = "DIR")]
    pub embeddings: Option<PathBuf>,
    /// Generated embeddings keyed by token: seed, layer count m, dimension D.
    #[arg(long, value_name = "SEED,M,D")]
    pub synthetic_embeddings: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Prepared training cache.
    #[arg(long)]
    pub train: PathBuf,
    /// Prepared development cache.
    #[arg(long)]
    pub dev: PathBuf,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, history and the effective config.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    /// Train the tagging loss only, without the language head.
    #[arg(long)]
    pub no_lang_clf: bool,
    /// Start from freshly initialized parameters (the default).
    #[arg(long, conflicts_with = "resume")]
    pub from_scratch: bool,
    /// Resume from the best checkpoint already in the output directory.
    #[arg(long = "continue", id = "resume")]
    pub resume: bool,
    /// Configuration override, e.g. --set train.base_lr=5e-5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated training topics (empty for all).
    #[arg(long)]
    pub train_topics: Option<String>,
    /// Comma-separated development topics (empty for all).
    #[arg(long)]
    pub dev_topics: Option<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Prepared cache to tag.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the K best label paths per sentence.
    #[arg(long, value_name = "K")]
    pub nbest: Option<usize>,
    /// Also write the predicted language per sentence.
    #[arg(long)]
    pub emit_lang: bool,
    /// Defaults to the embedding source recorded in the checkpoint.
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Word,
    Exact,
    Partial,
    Lang,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction directory written by `predict`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold directory: a prepared cache, or .ann (and .iob) files.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Also write the CSV report to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: corrupt the analytic transition gradient.
    #[arg(long, hide = true)]
    pub perturb_transition_gradient: bool,
}

/// Writes to standard output; a closed pipe (e.g. `| head`) is not an error.
pub fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SLAVTAG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("SLAVTAG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Selfcheck(a) => commands::selfcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("slavtag: {f}");
            f.exit_code()
        }
    }
}
