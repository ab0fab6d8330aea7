use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "varmatch", version, about = "Variational dense-proposal matching experiments")]
pub struct Cli {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the dataset and training seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads; falls back to VARMATCH_THREADS, then to all cores.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and eval scene sets as JSON lines.
    Gen(GenArgs),
    /// Train a proposal model; writes a checkpoint, the training log and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a detection file.
    Eval(EvalArgs),
    /// Export expected-IoU surfaces and the kink-jump summary.
    Gradmap(GradmapArgs),
    /// Train and evaluate once per value and seed.
    Sweep(SweepArgs),
}

#[derive(Debug, Default, Args)]
pub struct SceneOverrides {
    /// Occlusion band: bare, partial, heavy, mixed or "lo-hi".
    #[arg(long)]
    pub band: Option<String>,
    /// Canvas width and height.
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub canvas: Option<Vec<u32>>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    /// KL factor.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Upper clamp of log sigma; -12 makes sampling deterministic in practice.
    #[arg(long, allow_hyphen_values = true)]
    pub sigma_clamp_max: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Monte-Carlo draws per anchor and step.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub bag_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// table or linear.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub scene: SceneOverrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and eval.jsonl; defaults to --out.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Continue from the checkpoint in --out if there is one.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding train.jsonl and eval.jsonl; defaults to --out.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Defaults to checkpoint.json in --out.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// JSON file with one detection list per scene, evaluated instead of a checkpoint.
    #[arg(long, value_name = "PATH", conflicts_with = "checkpoint")]
    pub detections: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Fa,
    Fcos,
}

#[derive(Debug, Args)]
pub struct GradmapArgs {
    #[arg(long, value_enum, default_value = "fa")]
    pub kind: KindArg,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
    pub sigmas: Vec<f64>,
    /// Draws per surface point.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Draws per point of the kink-jump summary.
    #[arg(long, default_value_t = 100_000)]
    pub kink_samples: usize,
    /// Finite-difference step of the kink-jump summary.
    #[arg(long, default_value_t = 1e-2)]
    pub fd_step: f64,
    /// Points per axis; defaults to the built-in grid.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Samples,
    Bagsize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub train: TrainOverrides,
}
