//! `statute`: corpus ingestion, indexing, training, retrieval, evaluation and
//! attention export for two-stage statute retrieval.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statute_core::{LanguageProfile, ModelKind, Normalization};

use crate::error::{CliError, CliResult};
use crate::settings::{merge, ConfigFile};

#[derive(Debug, Parser)]
#[command(name = "statute", version, about = "Two-stage statute retrieval: BM25 filtering plus attentive neural reranking")]
struct Cli {
    /// Seed for every random choice: generation, sampling, initialization, shuffling, dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON settings with top-level `seed`/`threads` and one table per
    /// subcommand (e.g. `[train]`). A run manifest also works. Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel scoring (0 uses every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read corpus JSONL into a tokenized store with its vocabulary.
    Ingest(IngestArgs),
    /// Build the BM25 index; optionally write a BM25 run for a query file.
    Index(IndexArgs),
    /// Sample negatives for every (query, gold article) pair.
    MakeTrain(MakeTrainArgs),
    /// Train a reranker and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Rank articles for a query file and write a TREC-style run.
    Retrieve(RetrieveArgs),
    /// Score a run file against query judgments.
    Evaluate(EvaluateArgs),
    /// Grid-search the fusion weight on a query set.
    SweepAlpha(SweepArgs),
    /// Export attention weights of one (query, article) pair as JSON and HTML.
    Explain(ExplainArgs),
    /// Generate a synthetic corpus whose queries need synonym knowledge.
    GenSynthetic(GenSyntheticArgs),
}

impl Command {
    const NAMES: [&'static str; 9] = [
        "ingest",
        "index",
        "make-train",
        "train",
        "retrieve",
        "evaluate",
        "sweep-alpha",
        "explain",
        "gen-synthetic",
    ];
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Corpus JSONL, one article per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output store (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `spaced` (whitespace tokens) or `non-spaced` (character bigrams).
    #[arg(long, default_value = "spaced")]
    pub profile: LanguageProfile,
    /// Tokens rarer than this map to UNK.
    #[arg(long, default_value_t = 2)]
    pub min_frequency: usize,
    /// Longer articles keep only their first sentences.
    #[arg(long, default_value_t = 256)]
    pub max_sentences: usize,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Output index (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    /// Query JSONL to rank with BM25 alone (requires --run).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output run file for --queries.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub top_n: usize,
    #[arg(long, default_value = "bm25")]
    pub tag: String,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct MakeTrainArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Training queries (JSONL with judgments).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output instances (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `cnn_dot` or `general_attn_head`; picks the default negative mix.
    #[arg(long, default_value = "cnn_dot")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 4)]
    pub n_neg: usize,
    /// Share of negatives taken from the BM25 list (default 0.5 for cnn_dot, 1.0 for general_attn_head).
    #[arg(long)]
    pub lexical_mix: Option<f64>,
    /// BM25 depth lexical negatives come from.
    #[arg(long, default_value_t = 150)]
    pub lexical_depth: usize,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Instances from make-train.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation queries for early stopping on Macro-F2@1.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Output checkpoint (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epoch log (JSONL); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "cnn_dot")]
    pub model: ModelKind,
    /// Use embedding 512, 512 filters, attention dim 200, dropout 0.2.
    #[arg(long)]
    pub full_profile: bool,
    #[arg(long, default_value_t = 64)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub filters: usize,
    /// Convolution window is 2 * half_window + 1 tokens.
    #[arg(long, default_value_t = 1)]
    pub half_window: usize,
    #[arg(long, default_value_t = 32)]
    pub attention_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Keep the sampled random negatives fixed across epochs.
    #[arg(long)]
    pub no_resample: bool,
    /// Chance that a redrawn negative is another training query's gold article.
    #[arg(long, default_value_t = 0.0)]
    pub in_batch_rate: f64,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Required unless --alpha is 0.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output run file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight of the deep score; 0 is BM25 only, 1 is deep only.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// `minmax`, `zscore` or `none`.
    #[arg(long, default_value = "minmax")]
    pub normalization: Normalization,
    /// BM25 candidates per query (default 1000 for cnn_dot, 150 for general_attn_head).
    #[arg(long)]
    pub n_filter: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long, default_value = "fused")]
    pub tag: String,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Query JSONL whose `relevant` lists are the judgments.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,20")]
    pub k: Vec<usize>,
    /// Output report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Usually the validation queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output table (TSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value = "minmax")]
    pub normalization: Normalization,
    #[arg(long)]
    pub n_filter: Option<usize>,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub query_id: Option<String>,
    /// Article as `law_id:article_id`.
    #[arg(long)]
    pub article: Option<String>,
    /// Output weights (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Heatmap page; defaults to `<out>` with an `.html` extension.
    #[arg(long)]
    pub html: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub articles: usize,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    /// Share of queries phrased only with words their gold article lacks.
    #[arg(long, default_value_t = 0.5)]
    pub synonym_rate: f64,
    /// Queries sharing each gold article.
    #[arg(long, default_value_t = 2)]
    pub queries_per_gold: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Taken from the non-test part.
    #[arg(long, default_value_t = 0.2)]
    pub valid_fraction: f64,
}

/// Settings after layering, plus the snapshot recorded in manifests.
pub struct Resolved<T> {
    pub seed: u64,
    pub args: T,
    pub snapshot: Value,
    pub argv: Vec<String>,
}

fn resolve<T: Serialize + DeserializeOwned>(
    name: &str,
    args: &T,
    matches: &ArgMatches,
    config: &ConfigFile,
    seed: u64,
    threads: usize,
    argv: Vec<String>,
) -> CliResult<Resolved<T>> {
    let args = merge(name, args, matches, config.table(name))?;
    let snapshot = json!({ "seed": seed, "threads": threads, name: serde_json::to_value(&args)? });
    Ok(Resolved {
        seed,
        args,
        snapshot,
        argv,
    })
}

fn run(argv: Vec<String>) -> CliResult<()> {
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Err(CliError::Usage("missing subcommand".into()))
                }
                _ => Err(CliError::Usage(String::new())),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    config.check_keys(&Command::NAMES)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => config.global("seed")?.unwrap_or(0),
    };
    let threads = match cli.threads {
        Some(t) => t,
        None => config.global("threads")?.unwrap_or(0),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;

    let (name, sub) = matches
        .subcommand()
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    let argv = argv.into_iter().skip(1).collect();
    macro_rules! dispatch {
        ($args:expr, $f:path) => {
            $f(resolve(name, $args, sub, &config, seed, threads, argv)?)
        };
    }
    match &cli.command {
        Command::Ingest(a) => dispatch!(a, commands::ingest),
        Command::Index(a) => dispatch!(a, commands::index),
        Command::MakeTrain(a) => dispatch!(a, commands::make_train),
        Command::Train(a) => dispatch!(a, commands::train),
        Command::Retrieve(a) => dispatch!(a, commands::retrieve),
        Command::Evaluate(a) => dispatch!(a, commands::evaluate),
        Command::SweepAlpha(a) => dispatch!(a, commands::sweep_alpha),
        Command::Explain(a) => dispatch!(a, commands::explain),
        Command::GenSynthetic(a) => dispatch!(a, commands::gen_synthetic),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
