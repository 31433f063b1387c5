use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use islandseg::nn::Precision;
use islandseg::sweep::{FullKeyword, SizeSpec};

#[derive(Debug, Parser)]
#[command(name = "islandseg", version, about = "Island shoreline segmentation pipeline")]
pub struct Cli {
    /// Seed for every random choice; overrides seeds in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "islandseg-out")]
    pub out: PathBuf,
    /// JSON config for the subcommand, or a provenance record of an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data loading and parallel sweep cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic island dataset with a manifest.
    Synth(SynthArgs),
    /// Build a manifest over existing scene and mask rasters.
    Ingest(IngestArgs),
    /// Masked-autoencoder pretraining of the encoder.
    Pretrain(PretrainArgs),
    /// Train a segmentation decoder on a frozen encoder.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train one model per training-set size and report the results.
    Sweep(SweepArgs),
    /// Extract vector shorelines from predicted or reference masks.
    Extract(ExtractArgs),
    /// Re-render tables and plots from a sweep results file.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Extract(_) => "extract",
            Command::Report(_) => "report",
        }
    }
}

pub fn parse_precision(s: &str) -> Result<Precision, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown precision `{s}` (expected float32 or bfloat16)"))
}

pub fn parse_size(s: &str) -> Result<SizeSpec, String> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(SizeSpec::Full(FullKeyword::Full));
    }
    s.parse()
        .map(SizeSpec::Count)
        .map_err(|_| format!("bad size `{s}` (expected a count or `full`)"))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes.
    #[arg(long)]
    pub n: Option<usize>,
    /// Side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of 6-band scene rasters (GeoTIFF or MSR1).
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Directory of masks named `{id}.*` or `{id}_mask.*`.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// JSON object mapping scene ids to train, val or test.
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// Four 1-based block indices, e.g. 2,4,6,8.
    #[arg(long, value_delimiter = ',')]
    pub tap_layers: Option<Vec<usize>>,
}

#[derive(Debug, Default, Args)]
pub struct DecoderArgs {
    /// Four stage widths, deepest first, e.g. 512,256,128,64.
    #[arg(long, value_delimiter = ',')]
    pub channel_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub head_dropout: Option<f64>,
    #[arg(long)]
    pub norm_groups: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// Training epochs, at most 30.
    #[arg(long, visible_alias = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// float32 or bfloat16.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub freeze_encoder: Option<bool>,
    /// Keep one checkpoint per epoch instead of a rolling one.
    #[arg(long)]
    pub keep_epoch_checkpoints: Option<bool>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pretrain on every split's scenes instead of the training split only.
    /// Labels are never read.
    #[arg(long)]
    pub all_splits: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pretrained encoder checkpoint; without one the encoder is randomly
    /// initialized from the seed.
    #[arg(long)]
    pub encoder_checkpoint: Option<PathBuf>,
    /// Number of training scenes drawn from the training split.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file, or `best` / `last` for the run under --out.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep plan file; same as --config.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Training-set sizes, e.g. 5,10,25,full.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    pub sizes: Option<Vec<SizeSpec>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Manifest whose scenes are processed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Restrict to one split.
    #[arg(long)]
    pub split: Option<String>,
    /// Predict masks with this checkpoint; reference masks are used otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Individual mask rasters to contour.
    #[arg(long = "mask-file")]
    pub mask_files: Vec<PathBuf>,
    /// Ground sampling distance in meters per pixel.
    #[arg(long)]
    pub resolution_m: Option<f64>,
    /// Vertex-decimation tolerance in pixels; 0 keeps every vertex.
    #[arg(long)]
    pub simplify: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `results.json` written by `sweep`.
    #[arg(long)]
    pub results: Option<PathBuf>,
}
