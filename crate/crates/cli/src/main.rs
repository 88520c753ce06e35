mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Noise-aware saliency training from noisy labels.
#[derive(Parser, Debug)]
#[command(name = "nae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images/, labels/, clean/, manifest.json).
    Synth(SynthArgs),
    /// Train one variant and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run's checkpoint against clean labels.
    Eval(EvalArgs),
    /// Train and evaluate a list of variants with a shared configuration.
    Ablate(AblateArgs),
    /// Print the manifest of a run directory or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none, dilate:R, erode:R, blobs:N:R, attached:R:TOL or mixture.
    #[arg(long, default_value = "mixture")]
    pub noise: String,
    /// Side length; a positive multiple of 16.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Independently corrupted labels per image, each stored as its own pair.
    #[arg(long, default_value_t = 1)]
    pub labels_per_image: usize,
    /// Split index mixed into every example seed.
    #[arg(long, default_value_t = 0)]
    pub split: u64,
    /// Write a named benchmark (`synthbench-v1`) as `train/` and `eval/` instead.
    #[arg(long, conflicts_with_all = ["count", "noise", "resolution", "split", "labels_per_image"])]
    pub bench: Option<String>,
    #[arg(long, default_value = "synth")]
    pub name: String,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Training configuration sources, applied as preset < file < flags.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Starting point: `paper` (default) or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set sigma=0.2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub langevin_steps: Option<usize>,
}

impl ConfigArgs {
    pub fn is_empty(&self) -> bool {
        self.preset.is_none()
            && self.config.is_none()
            && self.sets.is_empty()
            && self.epochs.is_none()
            && self.lambda.is_none()
            && self.lr.is_none()
            && self.batch_size.is_none()
            && self.seed.is_none()
            && self.resolution.is_none()
            && self.langevin_steps.is_none()
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with images/ and labels/ (and clean/ for clean-label variants).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// full, f1, f1+ls, f+lc, cvae, clean-f or clean-f1.
    #[arg(long)]
    pub variant: Option<String>,
    /// Clean-labelled dataset evaluated after every epoch.
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
    /// Continue the run in this directory from its last checkpoint.
    #[arg(long, conflicts_with = "out")]
    pub resume: Option<PathBuf>,
    /// Repeat the run recorded in this manifest.
    #[arg(long, conflicts_with = "resume")]
    pub replay: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Clean-labelled dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `last`, `best`, an epoch number or a checkpoint path.
    #[arg(long, default_value = "last")]
    pub checkpoint: String,
    /// Report name; defaults to the dataset directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Seed for prior latents when the dataset is not the training set.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub eval_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant tags.
    #[arg(long, default_value = "f1,f1+ls,f+lc,full")]
    pub variants: String,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Run directory or `.ckpt` file.
    pub path: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a, &argv),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
