use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Anatomical prior attention for chest radiograph classification and
/// weakly-supervised localization.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
/// Set APAM_NUM_WORKERS to cap the worker threads.
#[derive(Debug, Parser)]
#[command(name = "apam", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-lesion dataset.
    Synth(SynthArgs),
    /// Build per-class anatomical prior maps from a bounding-box CSV.
    GenPriors(GenPriorsArgs),
    /// Compute chest ROI masks for a directory of images.
    GenRoi(GenRoiArgs),
    /// Train a model; writes checkpoints, the epoch log and a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint (classification AUC or localization accuracy).
    Eval(EvalArgs),
    /// Render heatmap overlays with ground-truth and predicted boxes.
    Render(RenderArgs),
    /// Re-execute the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings (TOML or JSON); defaults to the reference config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenPriorsArgs {
    /// CSV with `Image Index,Finding Label,x,y,w,h` rows.
    #[arg(long)]
    pub bbox: PathBuf,
    /// Class list file, or `nih` for the built-in ChestX-ray14 list.
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Edge of the square canvas the boxes are drawn on.
    #[arg(long, default_value_t = 1024)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct GenRoiArgs {
    /// Directory of PNG or JPEG images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dilation disc radius in working-resolution pixels.
    #[arg(long, default_value_t = 8)]
    pub radius: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub islands: usize,
    /// Square working resolution for post-processing; 0 keeps the source size.
    #[arg(long, default_value_t = 256)]
    pub working_edge: usize,
    /// `otsu` (built-in fallback) or `external:DIR` with one probability
    /// raster per image.
    #[arg(long, default_value = "otsu")]
    pub segmenter: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML or JSON) with `model`, `train`, `split` and `files` tables.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prior map directory from `gen-priors`.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// ROI mask directory from `gen-roi`; computed in memory when omitted.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Cls,
    Loc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cls")]
    pub mode: EvalMode,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3])]
    pub iou_thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Count images negative for a class as localization cases.
    #[arg(long)]
    pub include_negatives: bool,
    /// Overrides the prior directory recorded in the checkpoint.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Overrides the ROI directory recorded in the checkpoint.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated image ids, or `@FILE` with one id per line.
    #[arg(long)]
    pub images: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub priors: Option<PathBuf>,
    #[arg(long)]
    pub roi: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A `*_manifest.json` written by an earlier run.
    pub manifest: PathBuf,
}
