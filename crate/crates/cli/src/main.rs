//! `gtmn`: data preparation, training, generation, tracing and evaluation
//! for meta-word controlled response generation.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gtmn", version, about = "Meta-word controlled response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw JSONL corpus, annotate meta-words, split, and build vocabularies.
    Prepare(PrepareArgs),
    /// Train the response generator on a prepared directory.
    Train(TrainArgs),
    /// Train the meta-word predictor on a prepared directory.
    TrainPredictor(PredictorArgs),
    /// Generate responses as JSONL.
    Generate(GenerateArgs),
    /// Greedy decode one message and dump per-step goal distances as CSV.
    Trace(TraceArgs),
    /// Score generated responses against references.
    Evaluate(EvaluateArgs),
    /// Write a synthetic corpus whose responses follow their meta-words.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Raw JSONL with "message" and "response" fields.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Attributes to annotate: comma list of RL,DA,MU,CR,S, "all" or "none".
    #[arg(long)]
    pub attributes: Option<String>,
    /// Fraction of pairs held out for validation.
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    /// Maximum non-reserved vocabulary entries per side.
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Drop pairs where either side has more tokens than this.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Keep at most this many responses per message.
    #[arg(long)]
    pub max_responses: Option<usize>,
    /// Frequent words excluded from copy ratio.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Stopword list, one token per line (default: built-in list).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key = value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Attribute subset the model conditions on.
    #[arg(long)]
    pub attributes: Option<String>,
    /// Hidden, embedding and memory size.
    #[arg(long)]
    pub d: Option<usize>,
    /// State update loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without a validation perplexity drop before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient norm clip; 0 disables.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wall-clock limit in seconds; no epoch starts that would end past it.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Also append the per-epoch JSON lines to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictorArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub attributes: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Entropy regularization weight.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["message", "input"])))]
pub struct GenerateArgs {
    /// Generator checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Predictor checkpoint; needed for variables not fixed by --override.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// A single message.
    #[arg(long)]
    pub message: Option<String>,
    /// Messages, one per line (plain text or JSON with a "message" field).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Fixed variables, e.g. "RL=8,DA=yes-no-question,MU=false,CR=0.2,S=0.6".
    #[arg(long = "override")]
    pub overrides: Option<String>,
    /// Responses per message.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub message: String,
    /// Meta-word assignments; missing variables are filled with the predictor's mode.
    #[arg(long)]
    pub metaword: Option<String>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Generation JSONL (a plain message/response JSONL also works).
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference JSONL; repeated messages give multiple references.
    #[arg(long)]
    pub references: PathBuf,
    /// Generator checkpoint: embedding source and perplexity.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prepared directory whose frequency statistics drive meta-word extraction.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// External word vectors ("token v1 v2 ..." per line); overrides the model table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Write the report JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub print_json: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Invalid flag combination or value; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::TrainPredictor(a) => commands::train_predictor(a),
        Command::Generate(a) => commands::generate(a),
        Command::Trace(a) => commands::trace(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
