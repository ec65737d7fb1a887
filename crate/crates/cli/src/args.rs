use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aan", version, about = "Attribute-aware action detection over frame embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus on disk.
    Synth(SynthArgs),
    /// Count attribute co-occurrences over a corpus split.
    BuildPrior(PriorArgs),
    /// Train a model and write best and final checkpoints.
    Train(TrainArgs),
    /// Per-frame mAP and action-conditional metrics.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Write per-frame score files.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON spec to start from instead of the defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub n_attributes: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Per-frame probability that an active attribute is hidden.
    #[arg(long)]
    pub occlusion: Option<f64>,
    #[arg(long)]
    pub planted_pairs: Option<usize>,
    #[arg(long)]
    pub pair_rate: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args)]
pub struct PriorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the prior as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Ablation {
    Full,
    ExtractorOnly,
    LinearBaseline,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for checkpoints, the resolved config and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    /// JSON training config; replaces the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint with its stored config; only `--epochs` applies.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub disable_attention: bool,
    #[arg(long)]
    pub disable_temporal: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub attribute_loss_weight: Option<f64>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<video id>.aans` score files to evaluate instead of a checkpoint.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Also report action-conditional precision, F1 and mAP.
    #[arg(long)]
    pub conditional: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,20,40")]
    pub tau: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write per-class precision-at-positive curves as JSON here.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Worker threads for scoring videos.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Deliberately break the ReLU backward to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single feature file; `--out` is then the score file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub features: Option<PathBuf>,
    /// Score every video of a corpus; `--out` is then a directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Restrict `--manifest` to one split.
    #[arg(long, requires = "manifest")]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}
