use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "fourplane",
    version,
    about = "Four-plane video latents: training, sampling, evaluation and cost reporting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create or check a synthetic dataset
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train an autoencoder
    TrainCodec(TrainCodecArgs),
    /// Train a latent denoiser on top of a trained codec
    TrainDiffusion(TrainDiffusionArgs),
    /// Encode a clip into planes (or a latent volume)
    Encode(EncodeArgs),
    /// Decode planes (or a latent volume) back to a clip
    Decode(DecodeArgs),
    /// Class-conditional or unconditional generation
    Generate(GenerateArgs),
    /// Future-frame prediction from context frames
    Predict(PredictArgs),
    /// Frame interpolation between two boundary frames
    Interpolate(InterpolateArgs),
    /// Reconstruction metrics of a codec on a dataset split
    Eval(EvalArgs),
    /// Analytical sequence-length, FLOP and memory table
    Cost(CostArgs),
    /// Measured denoiser step time, four-plane versus volumetric
    Bench(BenchArgs),
    /// Summarise a run directory
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Render a synthetic dataset to disk
    Make(DatasetMakeArgs),
    /// Check hashes and shapes of a dataset on disk
    Verify { dir: PathBuf },
}

#[derive(Args, Debug)]
pub struct DatasetMakeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a dataset spec; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Run directory; created if missing
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory (with manifest.json)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run configuration JSON; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the run directory's latest checkpoint
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many steps are complete; the schedule still spans `--steps`
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Volumetric,
    FourPlane,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineArg {
    Concat,
    Sum,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceArg {
    MeanPool,
    LinearProj,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    SegmentPool,
    BoundaryEncode,
}

#[derive(Args, Debug)]
pub struct TrainCodecArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// CodecConfig JSON; flags override its values
    #[arg(long)]
    pub codec_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, value_enum)]
    pub combine: Option<CombineArg>,
    #[arg(long, value_enum)]
    pub reduce: Option<ReduceArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub f_t: Option<usize>,
    #[arg(long)]
    pub f_s: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub variational: Option<bool>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskArg {
    Class,
    Predict,
    Interpolate,
    Image,
}

#[derive(Args, Debug)]
pub struct TrainDiffusionArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained codec checkpoint
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// DenoiserConfig JSON; flags override its values
    #[arg(long)]
    pub denoiser_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Fraction of steps trained with self-conditioning
    #[arg(long)]
    pub self_cond: Option<f64>,
    #[arg(long)]
    pub label_dropout: Option<f64>,
    /// Final beta of the scaled-linear schedule before rescaling
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub codec: PathBuf,
    /// Clip tensor file (`.fpt`, `[T,H,W,3]`)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub codec: PathBuf,
    /// Plane file, or a latent tensor for volumetric codecs
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PNG strip of the frames
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub denoiser: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// DDIM steps
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Output directory for the clip, planes and PNG strip
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Class label; omitted means unconditional
    #[arg(long)]
    pub label: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Clip file; its leading context frames are used
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Clip file holding the boundary frames (first and last frame are used)
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Evaluate at most this many clips
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output JSON path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long, default_value_t = 5)]
    pub t: usize,
    #[arg(long, default_value_t = 16)]
    pub h: usize,
    #[arg(long, default_value_t = 16)]
    pub w: usize,
    #[arg(long, default_value_t = 8)]
    pub c: usize,
    /// DenoiserConfig JSON; defaults to the 214M surrogate
    #[arg(long)]
    pub denoiser_config: Option<PathBuf>,
    /// Memory budget in GiB for the batch-size estimate
    #[arg(long, default_value_t = 40.0)]
    pub budget_gib: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Latent shapes as `t,h,w,c`; repeatable
    #[arg(long = "shape", default_values_t = vec!["5,16,16,8".to_string()])]
    pub shapes: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for bench.csv and bench.svg
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    pub run: PathBuf,
}
