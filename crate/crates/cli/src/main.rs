use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use jotrecon::harness::ExperimentKind;
use jotrecon::Error;

mod commands;
mod config;

/// Jot sensor simulation and reconstruction.
///
/// Settings come from command-line flags, then the `--config` TOML file (one
/// table per subcommand, e.g. `[simulate]`), then built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "jotrecon", version, about)]
struct Cli {
    /// TOML file with per-command defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate binary frames of an intensity image.
    Simulate(SimulateArgs),
    /// Reconstruct an image from a frame stack.
    Reconstruct(ReconstructArgs),
    /// Learn a patch dictionary with k-SVD from clean images.
    TrainDict(TrainDictArgs),
    /// Train an unrolled network on simulated stacks of clean images.
    TrainNet(TrainNetArgs),
    /// PSNR between a reference and a reconstruction.
    Evaluate(EvaluateArgs),
    /// Run a desk-scale experiment and write its report directory.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Ground-truth image (.pfm, .pgm or .txt).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Intensity that a full-scale .pgm sample maps to [default: 10].
    #[arg(long)]
    pub peak: Option<f64>,
    /// Number of binary frames K [default: 4].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Threshold values tiled over the jots, e.g. "1..10" or "1,2,4" [default: 1..10].
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Jots per pixel side [default: 2].
    #[arg(long)]
    pub oversample: Option<usize>,
    /// Gaussian PSF width in jots [default: oversample / 2].
    #[arg(long)]
    pub psf_sigma: Option<f64>,
    /// PSF kernel as a whitespace-separated text matrix.
    #[arg(long, conflicts_with = "psf_sigma")]
    pub psf: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.bfs` file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Ml,
    Fista,
    Ista,
    Mlnet,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructArgs {
    /// Frame stack (.bfs).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Dictionary (.dict); required by fista, ista and mlnet.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Network parameters (.mlnet); required by mlnet.
    #[arg(long)]
    pub mlnet: Option<PathBuf>,
    /// Sparsity weight [default: 5% of the initial gradient magnitude].
    #[arg(long)]
    pub mu: Option<f64>,
    /// Iteration limit [default: 300].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Fixed step size [default: backtracking].
    #[arg(long)]
    pub eta: Option<f64>,
    /// Relative objective change that stops the solver [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Dynamic-range peak for initialization and PSNR [default: 10].
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(long)]
    pub oversample: Option<usize>,
    #[arg(long)]
    pub psf_sigma: Option<f64>,
    #[arg(long, conflicts_with = "psf_sigma")]
    pub psf: Option<PathBuf>,
    /// Patch stride [default: 4].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Softplus sharpness [default: 10].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ground truth; adds PSNR to the summary and trace.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output image (.pfm, .pgm or .txt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDictArgs {
    /// Clean training images.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub peak: Option<f64>,
    /// Patch side [default: 8].
    #[arg(long)]
    pub patch_side: Option<usize>,
    /// Patch stride [default: 4].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Number of atoms [default: 256].
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Nonzeros per code [default: 8].
    #[arg(long)]
    pub sparsity: Option<usize>,
    /// k-SVD iterations [default: 30].
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Intensities are clamped here before the inverse nonlinearity [default: 0.01].
    #[arg(long)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.dict` file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainNetArgs {
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Clean training images; stacks are simulated from them.
    #[arg(long = "truth", num_args = 1..)]
    pub truths: Vec<PathBuf>,
    /// Clean validation images [default: the training images].
    #[arg(long = "val", num_args = 1..)]
    pub vals: Vec<PathBuf>,
    /// Layers T [default: 10].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Share one parameter set across layers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub tied: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub oversample: Option<usize>,
    #[arg(long)]
    pub psf_sigma: Option<f64>,
    #[arg(long, conflicts_with = "psf_sigma")]
    pub psf: Option<PathBuf>,
    #[arg(long)]
    pub peak: Option<f64>,
    /// Sparsity weight of the initialization [default: calibrated].
    #[arg(long)]
    pub mu: Option<f64>,
    /// ISTA step of the initialization [default: calibrated].
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Write the ISTA-initialized network without training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub init_only: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.mlnet` file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss-curve CSV.
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// PSNR peak, also the .pgm full-scale intensity [default: 10].
    #[arg(long)]
    pub peak: Option<f64>,
    /// Also write `psnr_db,mse` to this CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(value_parser = parse_kind)]
    pub kind: ExperimentKind,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// MLNet layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// FISTA and ML iteration limit.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Ground-truth image instead of a synthetic scene.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Small images and short runs, for smoke tests.
    #[arg(long)]
    pub quick: bool,
    /// Report directory [default: report-<kind>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::DimensionMismatch { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Simulate(a) => commands::simulate(a, cfg.simulate),
        Command::Reconstruct(a) => commands::reconstruct(a, cfg.reconstruct),
        Command::TrainDict(a) => commands::train_dict(a, cfg.train_dict),
        Command::TrainNet(a) => commands::train_net(a, cfg.train_net),
        Command::Evaluate(a) => commands::evaluate(a, cfg.evaluate),
        Command::Experiment(a) => commands::experiment(a, cfg.experiment),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
