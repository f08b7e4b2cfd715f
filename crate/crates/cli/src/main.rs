//! `tide`: procedural data, two-stage training, lockstep sampling and
//! evaluation from the command line.
//!
//! Settings resolve as built-in defaults, then the `--config` file
//! (`key = value` lines, e.g. `train.lr = 0.001`), then explicit flags.
//! Commands that write files default to `$TIDE_OUT_DIR/<command>` (or
//! `tide-out/<command>`) when `--out` is omitted. Exit status is 0 on
//! success, 1 on usage or validation errors and 2 on I/O errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tide", version, about = "Tri-branch image/depth/mask diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render procedural quadruples into a dataset directory.
    GenData(GenDataArgs),
    /// Stage A: train the image branch, then the mini branch.
    Pretrain(PretrainArgs),
    /// Stage B: LoRA + TAN fine-tuning of the three-branch model.
    Train(TrainArgs),
    /// Sample one aligned triple for a caption.
    Sample(SampleArgs),
    /// Sample `n` triples per caption of a captions file.
    Synthesize(SynthesizeArgs),
    /// Depth and mask metrics of predictions against ground truth, or
    /// cross-modal consistency of one dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable unit.
    Gradcheck(GradcheckArgs),
    /// Train the ILS/TAN variants under one budget and compare consistency.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Scene seeds: a count `N` (seeds 0..N) or a range `A..B`.
    #[arg(long, default_value = "256")]
    pub seeds: String,
    /// Image side in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optimizer and schedule flags shared by both training stages.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Key-value config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to procedural scenes.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of procedural scenes used when `--data` is absent.
    #[arg(long, default_value_t = 256)]
    pub scenes: u64,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Diffusion timesteps T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Save a checkpoint every this many steps (0: first and last only).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue the run in `--out` from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Steps on the mini branch after the image branch.
    #[arg(long)]
    pub mini_iterations: Option<u64>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Transformer width.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub image_layers: Option<usize>,
    #[arg(long)]
    pub mini_layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Stage-A checkpoint (or run directory) to start from.
    #[arg(long, required_unless_present = "resume")]
    pub init: Option<PathBuf>,
    /// Disable implicit layout sharing.
    #[arg(long)]
    pub no_ils: bool,
    /// Disable time adaptive normalization.
    #[arg(long)]
    pub no_tan: bool,
    /// First image-branch layer whose layout is shared.
    #[arg(long)]
    pub share_start: Option<usize>,
    /// Last image-branch layer considered for sharing.
    #[arg(long)]
    pub share_end: Option<usize>,
    #[arg(long)]
    pub share_stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Stage-B checkpoint or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub caption: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reverse steps; defaults to the training T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One caption per line; blank lines are skipped.
    #[arg(long)]
    pub captions_file: PathBuf,
    /// Triples per unique caption.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Job k uses seed `seed + k`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub sub: Option<EvalCommand>,
    /// Predicted dataset directory.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth dataset directory (records matched by position).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Rescale each predicted depth map by the ratio of medians.
    #[arg(long)]
    pub median_align: bool,
    /// Compute depth metrics over pooled pixels instead of per image.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Mask-image agreement and depth-mask rank correlation of a dataset.
    Consistency {
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Stage-B steps per variant.
    #[arg(long)]
    pub budget: u64,
    /// Stage-A checkpoint; trained with `--pretrain-iterations` when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Stage-A image and mini steps when no `--init` is given.
    #[arg(long, default_value_t = 2000)]
    pub pretrain_iterations: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub scenes: u64,
    /// Captions scored per variant, taken from the training set.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
