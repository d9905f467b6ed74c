//! Configuration of the `run` subcommand: one JSON document describing every
//! pipeline stage, with explicit seeds so identical configs rerun
//! byte-identically.

use std::path::{Path, PathBuf};

use anatseg_core::anatomy::AnatomyConfig;
use anatseg_core::latent::{DEFAULT_ALPHA_STEPS, DEFAULT_REG};
use anatseg_core::phantom::PhantomParams;
use anatseg_core::volumetric::SelectConfig;
use anatseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything the end-to-end pipeline needs. Missing fields take the
/// defaults below, unknown fields are rejected so typos fail loudly, and
/// command-line flags (`--out`, `--seed`) override the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory receiving every artifact of the run.
    pub out_dir: PathBuf,
    /// Master seed; each stage derives its own stream from it, so no stage
    /// ever consumes wall-clock entropy.
    pub seed: u64,
    pub phantoms: PhantomStage,
    pub train: TrainStage,
    pub gmm: GmmStage,
    pub bank: BankStage,
    /// Validity thresholds shared by bank building, repair and validation.
    pub anatomy: AnatomyConfig,
    /// Area-drop tolerance for slice-range selection.
    pub tau: f64,
    /// Resolution of the latent interpolation grid during repair.
    pub alpha_steps: usize,
}

/// Phantom-generation stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomStage {
    /// Number of slices in the generated stack.
    pub n: usize,
    /// Square slice side in pixels; must match the autoencoder input size.
    pub size: usize,
    pub c_fraction: f64,
    pub scar_fraction: f64,
    pub noise_sigma: f64,
    pub px_spacing: f64,
    pub slice_gap: f64,
}

/// Autoencoder training stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStage {
    /// Latent dimension.
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Mixture model-selection stage settings; candidates run `k_min..=k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmStage {
    pub k_min: usize,
    pub k_max: usize,
    pub folds: usize,
    /// Covariance eigenvalue floor.
    pub reg: f64,
}

/// Latent-bank stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankStage {
    /// Number of accepted sampled vectors to collect (training-set
    /// insertions come on top).
    pub n: usize,
    /// Rejection-sampling trial budget.
    pub max_trials: u64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            out_dir: PathBuf::from("anatseg-run"),
            seed: 0,
            phantoms: PhantomStage::default(),
            train: TrainStage::default(),
            gmm: GmmStage::default(),
            bank: BankStage::default(),
            anatomy: AnatomyConfig::default(),
            tau: 0.6,
            alpha_steps: DEFAULT_ALPHA_STEPS,
        }
    }
}

impl Default for PhantomStage {
    fn default() -> PhantomStage {
        PhantomStage {
            n: 200,
            size: 64,
            c_fraction: 0.1,
            scar_fraction: 0.25,
            noise_sigma: 0.0,
            px_spacing: 1.0,
            slice_gap: 8.0,
        }
    }
}

impl Default for TrainStage {
    fn default() -> TrainStage {
        TrainStage { d: 16, epochs: 30, batch_size: 32, learning_rate: 1e-3 }
    }
}

impl Default for GmmStage {
    fn default() -> GmmStage {
        GmmStage { k_min: 1, k_max: 3, folds: 5, reg: DEFAULT_REG }
    }
}

impl Default for BankStage {
    fn default() -> BankStage {
        BankStage { n: 256, max_trials: 200_000 }
    }
}

impl PhantomStage {
    /// The per-slice generation parameters this stage config describes.
    pub fn params(&self) -> PhantomParams {
        PhantomParams {
            size: self.size,
            c_fraction: self.c_fraction,
            scar_fraction: self.scar_fraction,
            noise_sigma: self.noise_sigma,
            px_spacing: self.px_spacing,
            slice_gap: self.slice_gap,
        }
    }
}

impl PipelineConfig {
    /// Reads a config document, overlaying defaults for absent fields.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Cross-field sanity checks, run before any stage starts.
    pub fn validate(&self) -> Result<()> {
        self.phantoms.params().validate()?;
        if self.phantoms.n == 0 {
            return Err(Error::Parameter("phantoms.n must be at least 1".into()));
        }
        if self.train.d == 0 || self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Parameter(
                "train.d, train.epochs and train.batch_size must be at least 1".into(),
            ));
        }
        if self.gmm.k_min == 0 || self.gmm.k_min > self.gmm.k_max {
            return Err(Error::Parameter(format!(
                "gmm k range {}..={} is empty or starts at 0",
                self.gmm.k_min, self.gmm.k_max
            )));
        }
        if self.gmm.folds < 2 {
            return Err(Error::Parameter("gmm.folds must be at least 2".into()));
        }
        if self.bank.n == 0 {
            return Err(Error::Parameter("bank.n must be at least 1".into()));
        }
        if self.alpha_steps == 0 {
            return Err(Error::Parameter("alpha_steps must be at least 1".into()));
        }
        self.anatomy.validate()?;
        SelectConfig { tau: self.tau }.validate()?;
        Ok(())
    }
}
