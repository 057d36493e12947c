//! Command-line surface of the lab: argument definitions and dispatch.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "xlab",
    version,
    about = "Adapter and preference-optimization lab"
)]
pub struct Cli {
    /// Root for relative input paths.
    #[arg(long, global = true, env = "XALMA_LAB_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one training stage and write the resulting training state.
    Train(TrainArgs),
    /// Build preference triples from parallel data and a frozen model.
    BuildPrefdata(PrefArgs),
    /// Concatenate parallel pairs into pseudo-monolingual records.
    BuildPseudomono(PseudoArgs),
    /// Score a model on parallel data.
    Eval(EvalArgs),
    /// Fold one group's adapter into the base weights.
    MergeAdapter(MergeArgs),
    /// Plot the CDF of reward differences of preference sets.
    PlotCdf(PlotArgs),
    /// Compare preference methods on the synthetic cipher task.
    CompareLosses(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stage number, 1 to 5.
    #[arg(long)]
    pub stage: u8,
    /// Stage config file (TOML); flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Language group whose adapter the stage trains.
    #[arg(long)]
    pub group: Option<u32>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Record files; replaces the config's list.
    #[arg(long = "data", num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Training state to continue; a fresh default model otherwise.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Permit skipping or reordering stages.
    #[arg(long)]
    pub allow_out_of_order: bool,
    /// Where to write the training state.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrefArgs {
    /// Parallel records (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Model or training-state checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub group: Option<u32>,
    /// Post-edits as JSONL objects `{"x": source, "y_edit": edit}`.
    #[arg(long)]
    pub edits: Option<PathBuf>,
    /// Sampling temperature; greedy decoding when absent.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    /// Parallel records (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model or training-state checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Parallel test records (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub group: Option<u32>,
    /// Held-out scorer checkpoint for the proxy reward.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long)]
    pub scorer_group: Option<u32>,
    /// Token unit for lexical scores: `char` or `word`.
    #[arg(long, default_value = "char")]
    pub unit: String,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    /// Write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub group: u32,
    /// Base model or training-state checkpoint.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Adapter checkpoint, or any checkpoint carrying the group's adapter.
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Preference record files (JSONL); one series each.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Model or training-state checkpoint used for scoring.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub group: Option<u32>,
    /// Output directory for `cdf.csv` and `cdf.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated preference methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Experiment config (TOML); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Directory for the report and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub use commands::run;

/// Process exit code for a failed command: 3 for configuration errors, 1 otherwise.
pub fn exit_code(e: &xlab_core::Error) -> u8 {
    if e.is_config() {
        3
    } else {
        1
    }
}
