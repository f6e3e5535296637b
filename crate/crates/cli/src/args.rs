use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "psvit", version, about = "Progressive-sampling vision transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and FLOP counts with a per-module breakdown.
    Summary(SummaryArgs),
    /// Central-difference gradient audits.
    Gradcheck(GradcheckArgs),
    /// Train on an IDX dataset or the synthetic fixture.
    Train(TrainArgs),
    /// Top-1/top-5 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Sampling trajectories as CSV and SVG.
    Viz(VizArgs),
}

/// Model configuration: a JSON file or a preset, then per-field overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// JSON file mirroring the model configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ps-vit-ti, ps-vit-b or toy.
    #[arg(long)]
    pub preset: Option<String>,
    /// Share sampler weights across iterations.
    #[arg(long)]
    pub share: bool,
    /// Sampling points per axis.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sampling iterations N.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Transformer depth N_v after sampling.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl ModelArgs {
    pub fn any_set(&self) -> bool {
        self.config.is_some()
            || self.preset.is_some()
            || self.share
            || self.n.is_some()
            || self.iters.is_some()
            || self.depth.is_some()
            || self.dim.is_some()
            || self.heads.is_some()
            || self.classes.is_some()
            || self.input_size.is_some()
            || self.dropout.is_some()
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// IDX image file (idx3-ubyte).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file (idx1-ubyte).
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Use the two-class synthetic blob fixture instead of IDX files.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    pub synthetic: bool,
    /// Sample count for the synthetic fixture.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Seed for the synthetic fixture.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Debug)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Expected parameter count (suffixes K, M, B accepted).
    #[arg(long)]
    pub expect_params: Option<String>,
    /// Expected FLOPs (multiply-accumulates; suffixes K, M, B/G accepted).
    #[arg(long)]
    pub expect_flops: Option<String>,
    /// Allowed deviation for the expectations, in percent.
    #[arg(long, default_value_t = 10.0)]
    pub tol_pct: f64,
    /// Directory for summary.csv and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Operation name, "all" or "model".
    #[arg(default_value = "all")]
    pub scope: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Relative tolerance override.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Finite-difference step.
    #[arg(long, default_value_t = psvit::gradcheck::DEFAULT_STEP)]
    pub h: f64,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = psvit::train::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = psvit::optim::LrSchedule::DEFAULT_BASE_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = psvit::optim::LrSchedule::DEFAULT_WARMUP_EPOCHS)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = psvit::train::LABEL_SMOOTHING)]
    pub smoothing: f64,
    /// Stop once train accuracy reaches this fraction.
    #[arg(long)]
    pub target_acc: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional configuration the checkpoint must match exactly.
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = psvit::train::DEFAULT_BATCH)]
    pub batch: usize,
    /// Directory for eval.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Trained weights; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of images to visualize.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// SVG pixels per image pixel.
    #[arg(long, default_value_t = 8.0)]
    pub scale: f32,
    #[arg(long)]
    pub out: PathBuf,
}
