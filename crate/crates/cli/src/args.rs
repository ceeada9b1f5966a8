use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vground::harness::RunConfig;
use vground::{OptimizerConfig, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "vground",
    version,
    about = "Train and evaluate cosine-softmax visual grounding over precomputed embeddings",
    args_override_self = true
)]
pub struct Cli {
    /// Worker threads for evaluation and per-batch gradients [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset pair
    Synth(SynthArgs),
    /// Train the transformation layer and write a checkpoint
    Train(TrainArgs),
    /// Report AP50 and oracle recall of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Write the top-scoring box for every sample as JSON lines
    Predict(PredictArgs),
    /// Train and evaluate once per proposal budget
    #[command(name = "ablate-topk")]
    AblateTopK(AblateTopKArgs),
    /// Train and evaluate once per encoder dataset
    #[command(name = "ablate-encoders")]
    AblateEncoders(AblateEncodersArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON object with the same keys as the flags; explicit flags win
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Initial learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Nesterov momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// L2 weight decay on the transformation weights
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Learning-rate divisor applied at each decay boundary
    #[arg(long, default_value_t = 10.0)]
    pub decay_factor: f64,
    /// Epochs between learning-rate decays
    #[arg(long, default_value_t = 4)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Seed for initialization and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Proposals kept per sample, by detector score
    #[arg(long, default_value_t = 32)]
    pub top_k: usize,
    /// IoU a proposal needs with the ground-truth box to be a training target
    #[arg(long, default_value_t = 0.5)]
    pub min_gt_iou: f64,
    /// Count a hit only when IoU > 0.5 (false: IoU >= 0.5)
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub strict_ap50: bool,
}

impl RunArgs {
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            optimizer: OptimizerConfig {
                lr0: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                decay_factor: self.decay_factor,
                decay_every_epochs: self.decay_every,
                epochs: self.epochs,
                batch_size: self.batch_size,
                seed: self.seed,
            },
            top_k: self.top_k,
            min_gt_iou: self.min_gt_iou,
            strict_ap50: self.strict_ap50,
            train_dir: None,
            val_dir: None,
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    /// Proposals per sample
    #[arg(long, default_value_t = 16)]
    pub p: usize,
    #[arg(long, default_value_t = 64)]
    pub d_img: usize,
    #[arg(long, default_value_t = 32)]
    pub d_txt: usize,
    /// Standard deviation of the feature noise
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Lower bound of the referred proposal's detector score
    #[arg(long, default_value_t = 0.0)]
    pub gt_score_floor: f64,
    /// Output directory; `train/` and `test/` are created inside it
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            p: self.p,
            d_img: self.d_img,
            d_txt: self.d_txt,
            noise_sigma: self.noise,
            seed: self.seed,
            gt_score_floor: self.gt_score_floor,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    /// Training dataset directory
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset directory, evaluated after every epoch
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log CSV path [default: print to stdout]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint path
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Write the full per-sample report as JSON here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction JSONL path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateTopKArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub train: PathBuf,
    /// Dataset the AP50 values are measured on
    #[arg(long)]
    pub val: PathBuf,
    /// Proposal budgets to compare
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,48,64")]
    pub ks: Vec<usize>,
    /// Result CSV path [default: print to stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateEncodersArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    /// `LABEL=DIR`, where DIR holds `train/` and `test/` datasets; repeatable
    #[arg(long = "dataset", value_name = "LABEL=DIR", required = true)]
    pub datasets: Vec<String>,
    /// Result CSV path [default: print to stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Absolute error below which a coordinate always passes
    #[arg(long, default_value_t = 1e-8)]
    pub abs_floor: f64,
}
