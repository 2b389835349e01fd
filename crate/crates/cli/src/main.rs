mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult};

/// Few-shot projection fine-tuning on cached vision-language features.
#[derive(Debug, Parser)]
#[command(name = "projtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario (banks, classifier, pretrained head).
    Synth(SynthArgs),
    /// Zero-shot evaluation of a pretrained head.
    Zeroshot(ZeroshotArgs),
    /// Fine-tune a head with one of the supported methods.
    Train(TrainArgs),
    /// Evaluate a trained head, optionally on a base/new class split.
    Eval(EvalArgs),
    /// Grid search over learning rate and anchor weight on a validation bank.
    Sweep(SweepArgs),
    /// Per-sample test-time adaptation over a stream.
    Ttadapt(TtadaptArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long)]
    pub sigma_x: Option<f64>,
    #[arg(long)]
    pub sigma_t: Option<f64>,
    #[arg(long)]
    pub sigma_w: Option<f64>,
    #[arg(long)]
    pub signal_noise: Option<f64>,
    #[arg(long)]
    pub feature_scale: Option<f64>,
    /// Accept any draw instead of requiring moderate zero-shot accuracy.
    #[arg(long)]
    pub no_window: bool,
    /// Also write pre-projection text features and the text projector.
    #[arg(long)]
    pub text_features: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub proj: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = projtune::trainer::DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// adam or gd
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    /// constant or cosine
    #[arg(long, default_value = "constant")]
    pub lr_schedule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    /// Pretrained visual projection.
    #[arg(long)]
    pub proj: PathBuf,
    /// prolip, linear_probe, linear_adapter, taskres or textproj
    #[arg(long, default_value = "prolip")]
    pub method: String,
    /// A number, inv_shots, inv_shots_sq or zero.
    #[arg(long, default_value = "inv_shots")]
    pub lambda: String,
    /// Shots per class; the training bank is subsampled when it holds more.
    #[arg(long)]
    pub shots: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Pre-projection text features (textproj only).
    #[arg(long)]
    pub text_pre: Option<PathBuf>,
    /// Pretrained text projector (textproj only).
    #[arg(long)]
    pub text_proj: Option<PathBuf>,
    /// Residual weight (taskres only).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Initialize the linear probe at zero instead of the text rows.
    #[arg(long)]
    pub probe_zero_init: bool,
    /// Train on the base half of the classes only.
    #[arg(long)]
    pub base_only: bool,
    /// Report test accuracy of the trained and the pretrained model.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub proj: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Frozen visual projection, needed by every method except prolip.
    #[arg(long)]
    pub base_proj: Option<PathBuf>,
    /// Pre-projection text features, needed by textproj.
    #[arg(long)]
    pub text_pre: Option<PathBuf>,
    /// Split classes into base (first half) and new and report both.
    #[arg(long)]
    pub base_new: bool,
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub proj: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = projtune::trainer::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value = "constant")]
    pub lr_schedule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TtadaptArgs {
    #[arg(long)]
    pub proj: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Start from a few-shot trained head instead of the pretrained one.
    #[arg(long)]
    pub from_trained: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Carry the adapted head from one sample to the next.
    #[arg(long)]
    pub carry: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub max_input: usize,
    #[arg(long, default_value_t = 8)]
    pub max_embed: usize,
    #[arg(long, default_value_t = 8)]
    pub max_classes: usize,
    #[arg(long, default_value_t = 32)]
    pub max_samples: usize,
    #[arg(long, default_value_t = 3)]
    pub max_views: usize,
    /// Negate the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PROJTUNE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PROJTUNE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Zeroshot(a) => commands::zeroshot(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Ttadapt(a) => commands::ttadapt(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
