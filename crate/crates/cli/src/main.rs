mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Stroke-based generative models of handwritten characters.
#[derive(Parser, Debug)]
#[command(name = "glyphgen", version, about)]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base seed for every random stream.
    #[arg(long, global = true, env = "GLYPHGEN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// TOML file with per-command sections; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic raw corpus.
    Synth(SynthArgs),
    /// Fit minimal splines to a raw corpus.
    Preprocess(PreprocessArgs),
    /// Partition a processed corpus into train and test files.
    Split(SplitArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Grid search over model configurations with averaged validation loss.
    HpSearch(HpSearchArgs),
    /// Score a test set and write an evaluation report.
    Eval(EvalArgs),
    /// Models-by-splits summary of evaluation reports.
    Table(TableArgs),
    /// Paired t-test between two evaluation reports.
    Ttest(TtestArgs),
    /// Generate characters from a checkpoint.
    Sample(SampleArgs),
    /// Train the embedding classifier on rendered drawings.
    ClassifierTrain(ClassifierTrainArgs),
    /// Nearest training drawings of each sample.
    Neighbors(NeighborsArgs),
    /// Arrange 100 samples into a 10x10 style grid.
    Grid(GridArgs),
    /// Re-execute the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alphabets: Option<usize>,
    #[arg(long)]
    pub characters: Option<usize>,
    #[arg(long)]
    pub drawings: Option<usize>,
    #[arg(long)]
    pub max_strokes: Option<usize>,
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "residual-thresh")]
    pub residual_thresh: Option<f64>,
    #[arg(long)]
    pub min_length: Option<f64>,
    #[arg(long)]
    pub max_control_points: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SplitSelect {
    /// `alphabet:N`, `character:N` or `holdout:N`.
    #[arg(long)]
    pub split: Option<String>,
    /// Evaluation corpus for holdout splits.
    #[arg(long = "eval-corpus")]
    pub eval_corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub split: String,
    #[arg(long = "eval-corpus")]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelFlags {
    /// full_ns, hlstm or baseline.
    #[arg(long)]
    pub model: String,
    /// `standard` or `tiny` starting configuration.
    #[arg(long, default_value = "standard")]
    pub preset: String,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lstm_units: Option<usize>,
    #[arg(long)]
    pub lstm_layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Processed corpus; with --split only its training side is used.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub select: SplitSelect,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Validation corpus scored at every checkpoint.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct HpSearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// TOML grid: `[[candidate]]` tables with an `id` and model overrides.
    #[arg(long)]
    pub grid: PathBuf,
    /// Comma-separated outer splits, e.g. `alphabet:1,alphabet:2,alphabet:3`.
    #[arg(long, default_value = "alphabet:1,alphabet:2,alphabet:3")]
    pub splits: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Processed corpus; with a non-holdout --split only its test side is scored.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TtestArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 36)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClassifierTrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NeighborsArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    /// Processed corpus the neighbours are drawn from.
    #[arg(long)]
    pub index: PathBuf,
    /// `samples.json` written by `sample`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    commands::run(argv)
}
