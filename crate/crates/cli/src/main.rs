//! `ratlab`: batch front end over the core library.
//!
//! Every run writes its artifacts under one run directory together with a
//! frozen `config.json`; `ratlab rerun --config <file>` replays a snapshot
//! and, the whole pipeline being seeded, reproduces the metric tables
//! bit-identically. There is no interactive surface: submit a run, read
//! the tables and reports it leaves behind.

mod artifacts;
mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ratlab_core::attack::{Measure, Mode, QueryMethod};
use ratlab_core::data::Level;
use ratlab_core::model::{EncoderKind, Variant};

#[derive(Parser)]
#[command(
    name = "ratlab",
    version,
    about = "Rationalization models, universal trigger attacks on their explanations, \
             and the tables and reports that show the damage"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus with planted rationales.
    GenData(GenDataArgs),
    /// Train a rationalizer/predictor bundle.
    Train(TrainArgs),
    /// Search universal triggers against a trained bundle and score them.
    Attack(AttackArgs),
    /// Score a saved or hand-written trigger set.
    Evaluate(EvaluateArgs),
    /// Score saved trigger sets against a second, independently trained bundle.
    Transfer(TransferArgs),
    /// One attack per (measure, query) cell on a shared batch: 9 rows.
    Ablate(AblateArgs),
    /// One attack per trigger-shape cell, labels like `5-5` or `1[-1]-5`.
    Sweep(SweepArgs),
    /// Replay a frozen config snapshot.
    Rerun(RerunArgs),
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct GenDataArgs {
    /// Corpus directory to create: embeddings.txt plus three jsonl splits.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub dev_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub test_docs: usize,
    /// Total vocabulary size, structural tokens included.
    #[arg(long, default_value_t = 2000)]
    pub vocab: usize,
    /// Class-marked cue words per class.
    #[arg(long, default_value_t = 40)]
    pub cues_per_class: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub sentences_per_doc: usize,
    #[arg(long, default_value_t = 15)]
    pub tokens_per_sentence: usize,
    /// Planted-rationale fraction of each document.
    #[arg(long, default_value_t = 0.2)]
    pub sparsity: f64,
    /// Rate of off-class cue words sprinkled outside the planted span.
    #[arg(long, default_value_t = 0.02)]
    pub distractor_rate: f64,
    /// Gold-rationale granularity: token or sentence.
    #[arg(long, default_value = "token")]
    pub level: Level,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite an existing corpus directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct TrainArgs {
    /// Corpus directory (layout of `gen-data`).
    #[arg(long)]
    pub data: PathBuf,
    /// Parent directory the run directory is created under.
    #[arg(long)]
    pub out: PathBuf,
    /// Run directory name; default `train-<timestamp>`.
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long, default_value = "rnp")]
    pub variant: Variant,
    #[arg(long, default_value = "token")]
    pub level: Level,
    #[arg(long, default_value = "window")]
    pub encoder: EncoderKind,
    /// Hidden width; defaults to the variant recipe.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Context half-width of the windowed encoder.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Target selected fraction of the rationalizer.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Mask sampler temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_lr_scale: Option<f64>,
    #[arg(long)]
    pub rationalizer_lr_scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Non-improving epochs tolerated before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Sparsity / bottleneck penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gold-rationale supervision weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Drop the gold-rationale supervision term.
    #[arg(long)]
    pub unsupervised: bool,
    /// Feed the predictor the soft mask instead of the straight-through
    /// hard mask (ablation switch).
    #[arg(long)]
    pub soft_mask: bool,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Seeds both the parameter init and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Trigger placement, shared by the attack-style subcommands.
#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct ShapeArgs {
    /// Trigger group count; 1, 3 and 5 carry default insertion points.
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    /// Explicit insertion points (unit index before which each group goes,
    /// -1 meaning document end); overrides --groups.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub positions: Option<Vec<i64>>,
    /// Tokens (or sentences) per trigger group.
    #[arg(long, default_value_t = 5)]
    pub tokens_per_group: usize,
}

/// Greedy-search budget, shared by the attack-style subcommands.
#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct SearchArgs {
    /// Step length of the gradient move each candidate query starts from.
    #[arg(long, default_value_t = 1e4)]
    pub eta: f64,
    /// Weight of the prediction-anchoring term of the attack loss.
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    /// Candidates per slot per round.
    #[arg(long, default_value_t = 15)]
    pub candidates: usize,
    /// Hard cap on search rounds.
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    /// Quiet rounds tolerated before the search stops.
    #[arg(long, default_value_t = 10)]
    pub stop_patience: usize,
    /// Documents the search objective is averaged over.
    #[arg(long, default_value_t = 64)]
    pub search_batch: usize,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct AttackArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained bundle checkpoint (model.json of a train run).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    /// non_target pushes the rationale off the clean one; target drags it
    /// onto the triggers.
    #[arg(long, default_value = "non_target")]
    pub mode: Mode,
    /// Rationale-distance measure of the attack loss: mse, mae or mse_z.
    #[arg(long, default_value = "mse")]
    pub measure: Measure,
    /// Candidate proposal: kd_tree, random or hot_flip.
    #[arg(long, default_value = "kd_tree")]
    pub query: QueryMethod,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ShapeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// One full search per seed; the mean table aggregates across them.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Split the triggers are searched on.
    #[arg(long, default_value = "train")]
    pub search_split: String,
    /// Split the found triggers are scored on.
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    /// Annotated documents per report file.
    #[arg(long, default_value_t = 12)]
    pub report_samples: usize,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Trigger-set file saved by an attack run.
    #[arg(long, conflicts_with = "group")]
    pub triggers: Option<PathBuf>,
    /// Literal trigger group of space-separated surface tokens; repeatable.
    #[arg(long = "group")]
    pub group: Vec<String>,
    /// Insertion points for literal groups; defaults match --groups 1/3/5.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub positions: Option<Vec<i64>>,
    /// Mode label stamped on literal groups.
    #[arg(long, default_value = "non_target")]
    pub mode: Mode,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 12)]
    pub report_samples: usize,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct TransferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Bundle the triggers were searched on.
    #[arg(long)]
    pub source_model: PathBuf,
    /// Independently trained bundle under test.
    #[arg(long)]
    pub target_model: PathBuf,
    /// Trigger-set files; one transfer row per file.
    #[arg(long = "triggers", required = true)]
    pub triggers: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 6)]
    pub report_samples: usize,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long, default_value = "non_target")]
    pub mode: Mode,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ShapeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// One seed shared by all nine cells.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub search_split: String,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Shape cell `K-n` (default insertion points) or `K[p1,p2,...]-n`
    /// (explicit points, -1 = document end); repeatable. `1[-1]-5` is one
    /// 5-token group at the document end. Invalid cells are skipped with a
    /// warning.
    #[arg(long = "cell", required = true)]
    pub cell: Vec<String>,
    #[arg(long, default_value = "non_target")]
    pub mode: Mode,
    #[arg(long, default_value = "mse")]
    pub measure: Measure,
    #[arg(long, default_value = "kd_tree")]
    pub query: QueryMethod,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// One seed shared by all cells.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub search_split: String,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct RerunArgs {
    /// Frozen config snapshot of a previous run.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the output (parent) directory of the replayed command.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the run name of the replayed command.
    #[arg(long)]
    pub run_name: Option<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = commands::dispatch(cli.command) {
        eprintln!("ratlab: error: {:#}", e);
        std::process::exit(1);
    }
}
