//! `anatseg` — batch front end for anatomically constrained post-processing
//! of short-axis cardiac MR segmentations: preprocessing, pseudo-LGE
//! synthesis, phantom generation, autoencoder training, latent mixture
//! modelling, mask repair, slice-range selection and clinical metrics.
//!
//! Every report is line-delimited JSON on stdout. Exit codes: 0 success,
//! 1 usage error, 2 data or format error, 3 numerical or training error.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anatseg_core::latent::{DEFAULT_ALPHA_STEPS, DEFAULT_BANK_SIZE, DEFAULT_REG};
use anatseg_core::phantom::PhantomParams;
use anatseg_core::preprocess::{CLAHE_DEFAULT_CLIP, CLAHE_DEFAULT_TILES};
use anatseg_core::synth::SynthParams;
use anatseg_core::Error;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "anatseg",
    version,
    about = "Anatomically constrained post-processing for cardiac MR segmentations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standardize a stack: window, rotate, CLAHE, crop or pad, normalize
    Preprocess(PreprocessArgs),
    /// Synthesize pseudo-LGE images from cine slices and myocardium masks
    Synth(SynthArgs),
    /// Generate a synthetic annulus phantom stack with known ground truth
    GeneratePhantoms(GeneratePhantomsArgs),
    /// Train the myocardium mask autoencoder
    TrainAe(TrainAeArgs),
    /// Select the component count by cross-validated adjusted AIC and fit
    /// the latent mixture
    FitGmm(FitGmmArgs),
    /// Rejection-sample a bank of anatomically valid latent vectors
    BuildBank(BuildBankArgs),
    /// Check every slice against the anatomical validity predicate
    Validate(ValidateArgs),
    /// Repair each slice's myocardium until it passes the validity checks
    Repair(RepairArgs),
    /// Choose the apex-to-base slice range worth reporting
    SelectSlices(SelectSlicesArgs),
    /// Compare a predicted stack against ground truth
    Metrics(MetricsArgs),
    /// Quantify scar and gray zone per slice by FWHM thresholding
    Scar(ScarArgs),
    /// Execute the full phantom pipeline from one config document
    Run(RunArgs),
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Input stack directory.
    #[arg(long)]
    pub stack: PathBuf,
    /// CLAHE tile grid side (the grid is square).
    #[arg(long, default_value_t = CLAHE_DEFAULT_TILES)]
    pub clahe_tiles: usize,
    /// CLAHE clip limit.
    #[arg(long, default_value_t = CLAHE_DEFAULT_CLIP)]
    pub clahe_clip: f64,
    /// Square output size in pixels.
    #[arg(long, default_value_t = 192)]
    pub size: usize,
    /// Output stack directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Cine stack directory; every slice needs a mask.
    #[arg(long)]
    pub stack: PathBuf,
    /// Reference stack whose intensity histogram is matched.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of myocardium pixels converted to pseudo-scar.
    #[arg(long, default_value_t = SynthParams::default().scar_fraction)]
    pub scar_fraction: f64,
    /// Gaussian blur of the scar overlay, in pixels.
    #[arg(long, default_value_t = SynthParams::default().blur_sigma)]
    pub blur_sigma: f64,
    /// Overlay strength in [0, 1].
    #[arg(long, default_value_t = SynthParams::default().enhancement_gain)]
    pub gain: f64,
    /// Multiplicative speckle noise level.
    #[arg(long, default_value_t = SynthParams::default().speckle_sigma)]
    pub speckle_sigma: f64,
    /// Output stack directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GeneratePhantomsArgs {
    /// Number of slices to generate.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Square slice side in pixels.
    #[arg(long, default_value_t = PhantomParams::default().size)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of slices rendered with an open (C-shaped) ring.
    #[arg(long, default_value_t = PhantomParams::default().c_fraction)]
    pub c_fraction: f64,
    /// Fraction of slices carrying a planted fibrosis arc.
    #[arg(long, default_value_t = PhantomParams::default().scar_fraction)]
    pub scar_fraction: f64,
    /// Additive intensity noise level; 0 renders noiseless tissue classes.
    #[arg(long, default_value_t = PhantomParams::default().noise_sigma)]
    pub noise_sigma: f64,
    /// Pixel spacing in millimetres.
    #[arg(long, default_value_t = PhantomParams::default().px_spacing)]
    pub px_spacing: f64,
    /// Slice gap in millimetres.
    #[arg(long, default_value_t = PhantomParams::default().slice_gap)]
    pub slice_gap: f64,
    /// Output stack directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainAeArgs {
    /// Stack directory providing the training masks.
    #[arg(long)]
    pub masks: PathBuf,
    /// Square mask size fed to the model.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also encode the training masks into this latent file.
    #[arg(long)]
    pub latents_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FitGmmArgs {
    /// Latent vectors file.
    #[arg(long)]
    pub latents: PathBuf,
    /// Candidate component counts, inclusive, e.g. 1:8 or a single 3.
    #[arg(long, default_value = "1:8")]
    pub k_range: String,
    /// Cross-validation fold count.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Covariance eigenvalue floor.
    #[arg(long, default_value_t = DEFAULT_REG)]
    pub reg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Validity thresholds stored with the mixture (JSON); defaults apply
    /// when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mixture container output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BuildBankArgs {
    /// Mixture container produced by fit-gmm.
    #[arg(long)]
    pub gmm: PathBuf,
    /// Autoencoder model file.
    #[arg(long)]
    pub ae: PathBuf,
    /// Number of accepted sampled vectors to collect.
    #[arg(long, default_value_t = DEFAULT_BANK_SIZE)]
    pub n: usize,
    /// Training latents inserted ahead of sampling when their decodings
    /// pass the validity checks.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Rejection-sampling trial budget; defaults to max(200 n, 10000).
    #[arg(long)]
    pub max_trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bank container output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ValidateArgs {
    /// Stack directory; every slice needs a mask.
    #[arg(long)]
    pub stack: PathBuf,
    /// Validity thresholds (JSON); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct RepairArgs {
    /// Stack directory; every slice needs a mask.
    #[arg(long)]
    pub stack: PathBuf,
    /// Autoencoder model file.
    #[arg(long)]
    pub ae: PathBuf,
    /// Bank container produced by build-bank.
    #[arg(long)]
    pub bank: PathBuf,
    /// Resolution of the latent interpolation grid.
    #[arg(long, default_value_t = DEFAULT_ALPHA_STEPS)]
    pub alpha_steps: usize,
    /// Output stack directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SelectSlicesArgs {
    /// Stack directory; every slice needs a mask.
    #[arg(long)]
    pub stack: PathBuf,
    /// Area-drop tolerance.
    #[arg(long, default_value_t = 0.6)]
    pub tau: f64,
    /// Optional file receiving the selection report line.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Predicted stack directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth stack directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScarArgs {
    /// Stack directory; every slice needs a mask.
    #[arg(long)]
    pub stack: PathBuf,
    /// Report output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RunArgs {
    /// Pipeline config document (JSON); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip stages whose outputs exist and whose input hashes are unchanged.
    #[arg(long)]
    pub resume: bool,
}

/// Maps library errors onto the documented exit codes.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parameter(_) => 1,
        Error::Format(_)
        | Error::Consistency(_)
        | Error::Label(_)
        | Error::Io(_)
        | Error::Input(_)
        | Error::DegenerateRegion(_) => 2,
        Error::Numerical(_) | Error::Training { .. } | Error::SamplingExhausted { .. } => 3,
    }
}

fn dispatch(cli: Cli) -> anatseg_core::Result<u8> {
    match cli.command {
        Command::Preprocess(args) => commands::preprocess(&args).map(|()| 0),
        Command::Synth(args) => commands::synth(&args).map(|()| 0),
        Command::GeneratePhantoms(args) => commands::generate_phantoms_cmd(&args).map(|()| 0),
        Command::TrainAe(args) => commands::train_ae(&args).map(|()| 0),
        Command::FitGmm(args) => commands::fit_gmm(&args).map(|()| 0),
        Command::BuildBank(args) => commands::build_bank(&args).map(|()| 0),
        Command::Validate(args) => commands::validate(&args),
        Command::Repair(args) => commands::repair(&args).map(|()| 0),
        Command::SelectSlices(args) => commands::select_slices_cmd(&args).map(|()| 0),
        Command::Metrics(args) => commands::metrics(&args).map(|()| 0),
        Command::Scar(args) => commands::scar(&args).map(|()| 0),
        Command::Run(args) => {
            let mut cfg = match &args.config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            pipeline::run_pipeline(&cfg, args.resume).map(|()| 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
