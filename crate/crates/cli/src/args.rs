use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use sanity_core::detector::{ActivationKind, ClassTarget, TrainOptions};
use sanity_core::saliency::{ChannelReduction, Method, SaliencyConfig};
use sanity_core::sanity::{DataSanityConfig, SanityRunConfig};
use sanity_core::synthdata::GeneratorConfig;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "saliency-sanity", version, about = "Sanity checks for detector saliency maps")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Plain-text `key = value` file; keys are long flag names of the
    /// subcommand. Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// -v for progress, -vv for per-epoch detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset (PNG + annotation text per scene).
    Generate(GenerateArgs),
    /// Train the toy detector on a dataset directory.
    Train(TrainArgs),
    /// Explain every detection of one image.
    Explain(ExplainArgs),
    /// Cascading model-parameter randomization test.
    ModelSanity(ModelSanityArgs),
    /// Data randomization test: true labels against randomized labels.
    DataSanity(DataSanityArgs),
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ActivationArg {
    Relu,
    Smooth,
}

impl From<ActivationArg> for ActivationKind {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => ActivationKind::Relu,
            ActivationArg::Smooth => ActivationKind::Smooth,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClassTargetArg {
    Logit,
    Score,
}

impl From<ClassTargetArg> for ClassTarget {
    fn from(c: ClassTargetArg) -> Self {
        match c {
            ClassTargetArg::Logit => ClassTarget::Logit,
            ClassTargetArg::Score => ClassTarget::Score,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = GeneratorConfig::default().count)]
    pub count: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = GeneratorConfig::default().image_size)]
    pub image_size: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().max_objects)]
    pub max_objects: usize,
    /// Uniform noise amplitude added to every pixel.
    #[arg(long, default_value_t = GeneratorConfig::default().noise_amplitude)]
    pub noise: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

impl GenerateArgs {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            count: self.count,
            seed: self.seed,
            image_size: self.image_size,
            max_objects: self.max_objects,
            noise_amplitude: self.noise,
            ..GeneratorConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainOptions::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    pub lr: f64,
    /// Seed of the shuffling order.
    #[arg(long, default_value_t = TrainOptions::default().seed)]
    pub seed: u64,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Stop once train mAP@0.5 reaches this value.
    #[arg(long, default_value_t = 0.8)]
    pub target_map: f64,
    /// Spend the whole epoch budget instead of stopping at the target.
    #[arg(long)]
    pub full_budget: bool,
    #[arg(long, default_value_t = TrainOptions::default().eval_every)]
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = TrainOptions::default().clip_norm.unwrap_or(0.0))]
    pub clip_norm: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Permute class labels across the whole dataset before training.
    #[arg(long)]
    pub random_labels: bool,
    /// Gaussian noise (pixels) added to every box coordinate. Defaults to
    /// a tenth of the mean box side when --random-labels is set.
    #[arg(long, value_name = "STDDEV")]
    pub box_noise: Option<f64>,
    #[arg(long, default_value_t = DataSanityConfig::default().randomization_seed)]
    pub randomization_seed: u64,
}

impl TrainArgs {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            learning_rate: self.lr,
            seed: self.seed,
            target_map: (!self.full_budget).then_some(self.target_map),
            eval_every: self.eval_every,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..TrainOptions::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SaliencyArgs {
    /// Integrated Gradients interpolation steps.
    #[arg(long, default_value_t = SaliencyConfig::default().ig_steps)]
    pub ig_steps: usize,
    /// Integrated Gradients baseline pixel value (0 is a black image).
    #[arg(long, default_value_t = 0.0)]
    pub ig_baseline: f64,
    #[arg(long, default_value_t = SaliencyConfig::default().smooth_samples)]
    pub smooth_samples: usize,
    /// SmoothGrad noise level as a fraction of the input range.
    #[arg(long, default_value_t = SaliencyConfig::default().smooth_sigma)]
    pub smooth_sigma: f64,
    /// Channel reduction: sum_abs, max_abs or mean_abs.
    #[arg(long, default_value = "sum_abs")]
    pub reduction: ChannelReduction,
    /// Class decisions differentiate the logit or the sigmoid score.
    #[arg(long, value_enum, default_value_t = ClassTargetArg::Logit)]
    pub class_target: ClassTargetArg,
    /// Seed of the SmoothGrad noise.
    #[arg(long, default_value_t = SaliencyConfig::default().seed)]
    pub saliency_seed: u64,
}

impl SaliencyArgs {
    pub fn config(&self) -> SaliencyConfig {
        use sanity_core::saliency::Baseline;
        SaliencyConfig {
            reduction: self.reduction,
            class_target: self.class_target.into(),
            ig_steps: self.ig_steps,
            ig_baseline: if self.ig_baseline == 0.0 {
                Baseline::Black
            } else {
                Baseline::Constant(self.ig_baseline)
            },
            smooth_samples: self.smooth_samples,
            smooth_sigma: self.smooth_sigma,
            seed: self.saliency_seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DetectionArgs {
    /// Minimum class score of a detection.
    #[arg(long, default_value_t = SanityRunConfig::default().score_threshold)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = SanityRunConfig::default().nms_iou)]
    pub nms_iou: f64,
}

/// Overrides of the aspect detector thresholds.
#[derive(Debug, Args, Serialize)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub edge_correlation: Option<f64>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long)]
    pub interest_share: Option<f64>,
    #[arg(long)]
    pub box_share: Option<f64>,
    #[arg(long)]
    pub texture_intersection: Option<f64>,
    #[arg(long)]
    pub artifact_ratio: Option<f64>,
    #[arg(long)]
    pub intensity_low: Option<f64>,
    #[arg(long)]
    pub intensity_high: Option<f64>,
}

impl ThresholdArgs {
    pub fn apply(&self, t: &mut sanity_core::metrics::MetricThresholds) {
        let pairs = [
            (self.edge_correlation, &mut t.edge_correlation),
            (self.top_fraction, &mut t.top_fraction),
            (self.interest_share, &mut t.interest_share),
            (self.box_share, &mut t.box_share),
            (self.texture_intersection, &mut t.texture_intersection),
            (self.artifact_ratio, &mut t.artifact_ratio),
            (self.intensity_low, &mut t.intensity_low),
            (self.intensity_high, &mut t.intensity_high),
        ];
        for (value, slot) in pairs {
            if let Some(v) = value {
                *slot = v;
            }
        }
    }
}

/// Held-out scenes: a dataset directory or a freshly generated set.
#[derive(Debug, Args, Serialize)]
pub struct TestDataArgs {
    /// Test scenes on disk; generated from --test-seed when absent.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub test_count: usize,
    #[arg(long, default_value_t = 1_000)]
    pub test_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// RGB PNG of the detector's input size.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// gradients, gbp, ig, sgbp or sig.
    #[arg(long, default_value = "gbp")]
    pub method: Method,
    /// Comma-separated decisions (class, x_min, y_min, x_max, y_max) or `all`.
    #[arg(long, default_value = "all")]
    pub decision: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelSanityArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: TestDataArgs,
    /// Ascending randomization fractions from 0 to 1.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub levels: Vec<f64>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "gbp,sgbp,ig,sig")]
    pub methods: Vec<Method>,
    #[arg(long, default_value = "all")]
    pub decisions: String,
    /// Images to explain (the first N scenes).
    #[arg(long, default_value_t = SanityRunConfig::default().image_count)]
    pub images: usize,
    #[arg(long, default_value_t = SanityRunConfig::default().randomization_seed)]
    pub randomization_seed: u64,
    /// Detector name in the score table.
    #[arg(long, default_value = "toy")]
    pub detector_name: String,
    /// Skip writing the 16-bit map of every grid cell.
    #[arg(long)]
    pub no_maps: bool,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DataSanityArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: TestDataArgs,
    /// Training scenes on disk; generated from --train-seed when absent.
    #[arg(long, value_name = "DIR")]
    pub train_dataset: Option<PathBuf>,
    #[arg(long, default_value_t = GeneratorConfig::default().count)]
    pub train_count: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().seed)]
    pub train_seed: u64,
    /// Skip training: compare these two checkpoints (needs --random-checkpoint).
    #[arg(long, value_name = "FILE", requires = "random_checkpoint")]
    pub true_checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "true_checkpoint")]
    pub random_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DataSanityConfig::default().true_training.epochs)]
    pub true_epochs: usize,
    #[arg(long, default_value_t = DataSanityConfig::default().random_training.epochs)]
    pub random_epochs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub target_map: f64,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Keep the true class labels (box noise only).
    #[arg(long)]
    pub keep_labels: bool,
    #[arg(long, value_name = "STDDEV")]
    pub box_noise: Option<f64>,
    #[arg(long, default_value_t = DataSanityConfig::default().randomization_seed)]
    pub randomization_seed: u64,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "gbp,sgbp,ig,sig")]
    pub methods: Vec<Method>,
    #[arg(long, default_value = "all")]
    pub decisions: String,
    /// A pair differs when its SSIM is below this.
    #[arg(long, default_value_t = DataSanityConfig::default().ssim_threshold)]
    pub ssim_threshold: f64,
    /// A method passes when at least this fraction of its pairs differ.
    #[arg(long, default_value_t = DataSanityConfig::default().pass_fraction)]
    pub pass_fraction: f64,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}
