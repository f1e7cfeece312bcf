use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Token-level preference optimization on a synthetic polyseme task.
#[derive(Debug, Parser)]
#[command(name = "tkto", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a labelled JSONL dataset.
    GenData(GenDataArgs),
    /// Train one objective from a base checkpoint or a fresh warm start.
    Train(TrainArgs),
    /// Targeted accuracy, error rate and bad-case ratio of a checkpoint.
    Eval(EvalArgs),
    /// Reward histograms and weight maps of a contrastive pair.
    Analyze(AnalyzeArgs),
    /// TKTO over several weight clamp ranges, one shared contrastive pair.
    Sweep(SweepArgs),
    /// Re-run the invocation recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// JSON config; flags override it, it overrides built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_desirable: Option<usize>,
    #[arg(long)]
    pub n_undesirable: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveName {
    Sft,
    Dpo,
    Kto,
    Tkto,
}

impl ObjectiveName {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveName::Sft => "sft",
            ObjectiveName::Dpo => "dpo",
            ObjectiveName::Kto => "kto",
            ObjectiveName::Tkto => "tkto",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub objective: ObjectiveName,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train on prompt-sharing desirable/undesirable pairs only.
    #[arg(long)]
    pub paired: bool,
    /// Start from this checkpoint instead of a warm start.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Value-function sharpness for dpo, kto and tkto.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pi_plus: PathBuf,
    #[arg(long)]
    pub pi_minus: PathBuf,
    /// Weight table to map; must carry the pair's checkpoint digests.
    /// Estimated from the pair when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample indices for the weight map, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "-1,1;-2,2;-3,3", allow_hyphen_values = true)]
    pub ranges: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set; generated from the config when absent.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Where to write; the recorded output path otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
