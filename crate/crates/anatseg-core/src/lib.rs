//! Core library for anatomically constrained post-processing of short-axis
//! cardiac MR segmentations.
//!
//! The crate covers the full pipeline that turns raw segmentation masks into
//! anatomically valid, clinically quantified volumes:
//!
//! * [`stack`] / [`stack_io`] — volume, slice and mask types plus the on-disk
//!   stack directory format (`manifest.json`, raw `u16` intensity slices,
//!   PGM label masks).
//! * [`preprocess`] — windowing, quarter rotations, CLAHE, centered
//!   crop-or-pad and blood-pool based intensity normalization.
//! * [`synth`] — pseudo-LGE synthesis from cine images (scar growth,
//!   Gaussian blur, histogram matching, speckle noise).
//! * [`anatomy`] — binary-mask morphology and the per-slice anatomical
//!   validity predicate `delta`.
//! * [`autoencoder`] — a small convolutional autoencoder over binary masks,
//!   trained with hand-written backpropagation and Adam.
//! * [`latent`] — Gaussian mixture modelling of the latent space, model
//!   selection via an effective-rank adjusted AIC, rejection-sampled banks of
//!   anatomically valid latent vectors and latent-space mask repair.
//! * [`volumetric`] — slice-range selection along the apex-to-base axis.
//! * [`clinical`] — Dice, Hausdorff distance, cavity volume and FWHM scar
//!   quantification.
//! * [`losses`] — balanced cross-entropy and Tversky losses for external
//!   segmentation trainers.
//! * [`phantom`] — synthetic short-axis phantoms used for testing and for
//!   exercising the pipeline end to end.
//!
//! All randomized routines take explicit seeds and are deterministic for a
//! given seed on every platform.

pub mod anatomy;
pub mod autoencoder;
pub mod clinical;
pub mod latent;
mod linalg;
pub mod losses;
pub mod phantom;
pub mod preprocess;
pub mod stack;
pub mod stack_io;
pub mod synth;
pub mod volumetric;

pub use stack::{BinaryMask, IntensitySlice, Label, SegMask, StackSlice, StudyMetadata, VolumeStack};

/// Errors produced by this crate.
///
/// The CLI maps these onto process exit codes: [`Error::Parameter`] exits
/// with 1 (a usage problem), the other data and format variants up to and
/// including [`Error::DegenerateRegion`] exit with 2, and numerical,
/// training and sampling failures exit with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file or byte stream does not conform to its documented format.
    #[error("format error: {0}")]
    Format(String),
    /// Cross-slice or cross-field invariants of a volume are violated.
    #[error("consistency error: {0}")]
    Consistency(String),
    /// A mask pixel carries a label outside the supported range `0..=3`.
    #[error("label value {0} outside the supported range 0..=3")]
    Label(u8),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A caller-supplied parameter is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// An operation precondition on the data itself is violated.
    #[error("input error: {0}")]
    Input(String),
    /// A region reduces to a single intensity where a spread is required.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    /// A numerical routine produced non-finite values or failed to make
    /// progress.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Training diverged or was mis-configured.
    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    /// Rejection sampling hit its trial budget before collecting the
    /// requested number of anatomically valid latent vectors. The vectors
    /// accepted so far are returned so callers can decide whether a partial
    /// bank is usable.
    #[error("rejection sampling exhausted after {trials} trials: {accepted}/{requested} accepted")]
    SamplingExhausted {
        accepted: usize,
        requested: usize,
        trials: u64,
        partial: Box<latent::LatentBank>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
