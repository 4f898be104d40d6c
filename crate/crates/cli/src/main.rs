//! `hypercd`: dataset preparation, contrastive pretraining, downstream
//! training regimes, evaluation, ablation sweeps, and FLOPs reporting for
//! cross-domain hyperspectral classification.
//!
//! Every command writes its artifacts plus a `manifest.json` (command line,
//! resolved configuration, seeds, input/artifact checksums, timings) into
//! the output directory, so runs can be re-executed and verified.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hypercd_core::Error as CoreError;

/// Stable exit codes per error class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                CoreError::InvalidArg(_) => 2,
                CoreError::Io { .. } => 3,
                CoreError::Format { .. } | CoreError::LabelRange { .. } => 4,
                CoreError::ShapeMismatch { .. }
                | CoreError::UnknownDomain(_)
                | CoreError::ArchMismatch(_) => 5,
                CoreError::NonFinite { .. } | CoreError::NumericAbort { .. } => 6,
                CoreError::InsufficientData(_)
                | CoreError::SingleGroup
                | CoreError::EmptyBatch => 7,
            },
        }
    }

    /// A one-line remediation hint for the most common stumbles.
    fn hint(&self) -> Option<&'static str> {
        match self {
            CliError::Core(CoreError::ShapeMismatch { .. })
            | CliError::Core(CoreError::ArchMismatch(_)) => Some(
                "hint: the checkpoint's band/class/architecture layout must match the data; \
                 re-run pretraining on matching cubes or pass matching --channels/--n flags",
            ),
            CliError::Core(CoreError::Io { .. }) => {
                Some("hint: check the path; checkpoints are produced by `hypercd pretrain`/`hypercd train`")
            }
            _ => None,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hypercd",
    version,
    about = "Cross-domain hyperspectral representation learning toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force fully sequential, bit-reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
    /// Key-value config file (flags override file values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
}

impl CommonArgs {
    /// Worker count for independent runs/sweep points: sequential when
    /// deterministic, otherwise capped by HYPERCD_THREADS.
    pub fn threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        let cap = std::env::var("HYPERCD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1);
        let avail = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        cap.unwrap_or(avail).min(avail).max(1)
    }

    pub fn load_config(&self) -> Result<config::ConfigFile, CliError> {
        match &self.config {
            Some(path) => config::ConfigFile::load(path),
            None => Ok(config::ConfigFile::default()),
        }
    }
}

/// Architecture/hyperparameter override flags shared by training commands.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    /// Contrastive region side p.
    #[arg(long)]
    pub p: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Contrastive pretraining iterations.
    #[arg(long = "pretrain-iterations")]
    pub pretrain_iterations: Option<usize>,
    /// Downstream training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Trunk width (channels).
    #[arg(long)]
    pub channels: Option<usize>,
    /// Number of residual modules n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Use the original multi-scale encoder instead of the single 5x5 one.
    #[arg(long)]
    pub multiscale: bool,
    /// Gain applied to standardized inputs.
    #[arg(long = "input-scale")]
    pub input_scale: Option<f64>,
    /// Labeled training samples drawn per run.
    #[arg(long = "train-per-domain")]
    pub train_per_domain: Option<usize>,
    /// Number of repeated runs with fresh splits.
    #[arg(long)]
    pub runs: Option<usize>,
}

impl HyperArgs {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            p: self.p,
            tau: self.tau,
            pretrain_iterations: self.pretrain_iterations,
            finetune_iterations: self.iterations,
            channels: self.channels,
            n_res_modules: self.n,
            multiscale: self.multiscale.then_some(true),
            input_scale: self.input_scale,
            train_per_domain: self.train_per_domain,
            runs: self.runs,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Scratch,
    CdScratch,
    SupPretrain,
    SelfSup,
}

impl From<RegimeArg> for hypercd_core::Regime {
    fn from(value: RegimeArg) -> Self {
        match value {
            RegimeArg::Scratch => hypercd_core::Regime::Scratch,
            RegimeArg::CdScratch => hypercd_core::Regime::CdScratch,
            RegimeArg::SupPretrain => hypercd_core::Regime::SupPretrain,
            RegimeArg::SelfSup => hypercd_core::Regime::SelfSup,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled domains as HSC1 cube files.
    Synth(commands::synth::SynthArgs),
    /// Import a CSV fixture (`row,col,label,v1..vB`) as an HSC1 cube.
    Import(commands::import::ImportArgs),
    /// Contrastive pretraining over multiple unlabeled cubes.
    Pretrain(commands::pretrain::PretrainArgs),
    /// Train a downstream model under one of the four regimes.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint on a labeled cube.
    Eval(commands::eval::EvalArgs),
    /// Sweep one axis (p, samples, n, backbone) and tabulate OA/AA.
    Sweep(commands::sweep::SweepArgs),
    /// Layer-by-layer FLOPs of one full-image forward pass.
    Flops(commands::flops::FlopsArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Import(args) => commands::import::run(args),
        Command::Pretrain(args) => commands::pretrain::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::Flops(args) => commands::flops::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = e.hint() {
                eprintln!("{hint}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
