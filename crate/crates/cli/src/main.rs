//! `ovseg`: synthetic data, pair mining, tuning, segmentation and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary segmentation with mask-adapted encoding, at desk scale")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "OVSEG_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Pretrain a baseline encoder on whole-object photos.
    Pretrain(PretrainArgs),
    /// Mine mask-category pairs.
    Mine(MineArgs),
    /// Adapt an encoder to masked crops.
    Tune(TuneArgs),
    /// Segment every image of a dataset.
    Segment(SegmentArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Run a bottleneck analysis.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    /// Fewest labeled shapes per scene.
    #[arg(long, default_value_t = 2)]
    pub min_shapes: usize,
    /// Most labeled shapes per scene.
    #[arg(long, default_value_t = 4)]
    pub max_shapes: usize,
    /// Maximum proposal distortion in pixels; 0 makes proposals equal the ground truth.
    #[arg(long, default_value_t = 1)]
    pub jitter: usize,
    /// Captions written per scene.
    #[arg(long, default_value_t = 5)]
    pub captions_per_image: usize,
    /// Unlabeled clutter blobs per image.
    #[arg(long, default_value_t = 10)]
    pub clutter: usize,
    /// Dimension of the shipped proposal embeddings; 0 ships none.
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    /// Noise added to the shipped embeddings.
    #[arg(long, default_value_t = 0.15)]
    pub embed_noise: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Object photos rendered for training.
    #[arg(long, default_value_t = 2000)]
    pub images: usize,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Softmax temperature on cosine similarities.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for pairs.jsonl and stats.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder checkpoint used for matching [default: fresh weights from --seed].
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Captions read per image.
    #[arg(long, default_value_t = 1)]
    pub captions_per_image: usize,
    /// Use ground-truth segments instead of proposals [default: off].
    #[arg(long)]
    pub use_gt_masks: bool,
    /// Use ground-truth class names instead of caption nouns [default: off].
    #[arg(long)]
    pub use_gt_classes: bool,
    /// Drop pairs scoring below this [default: keep all].
    #[arg(long)]
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Dataset directory the pairs were mined from.
    #[arg(long)]
    pub data: PathBuf,
    /// pairs.jsonl, or the directory holding it.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint [default: fresh weights from --seed].
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Which parameter groups train, and in what order.
    #[arg(long, default_value = "ft-then-mpt", value_parser = ["mpt", "ft", "ft-then-mpt", "mpt-then-ft", "simul"])]
    pub mode: String,
    /// Layers that receive mask prompts.
    #[arg(long, default_value_t = 3)]
    pub prompt_depth: usize,
    /// Hyperparameter preset.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Epochs for every phase [default: from the preset].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: from the preset].
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder checkpoint [default: fresh weights from --seed].
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight of the encoder branch in the geometric ensemble.
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    /// Softmax temperature on cosine similarities.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Crop without blanking the background [default: off].
    #[arg(long)]
    pub keep_background: bool,
    /// Skip proposals below this confidence [default: keep all].
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Ignore proposal embeddings shipped with the dataset [default: off].
    #[arg(long)]
    pub no_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted index PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth index PNGs.
    #[arg(long)]
    pub gt: PathBuf,
    /// Vocabulary JSON.
    #[arg(long)]
    pub vocab: PathBuf,
    /// File of seen class names, one per line [default: flags in the vocabulary].
    #[arg(long)]
    pub seen_list: Option<PathBuf>,
    /// Output directory for report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Mask,
    Class,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth masks with the encoder, or proposals with ground-truth labels.
    #[arg(long, value_enum)]
    pub which: Which,
    /// Encoder checkpoint for `mask` [default: fresh weights from --seed].
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Softmax temperature on cosine similarities.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Crop without blanking the background [default: off].
    #[arg(long)]
    pub keep_background: bool,
    /// Output directory for report.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
