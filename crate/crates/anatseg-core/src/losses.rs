//! Segmentation training losses: balanced cross-entropy, a Tversky overlap
//! loss and their weighted combination.
//!
//! Ground truth `p` is a `{0, 1}` pixel grid and `p_hat` a probability grid
//! of the same length; both are passed as flat slices so callers can feed
//! single slices or whole batches.

use crate::{Error, Result};

/// Parameters shared by the loss functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// Class trade-off used by both losses: weights the foreground term of
    /// the cross-entropy and the false-positive count of the Tversky loss;
    /// the complement `1 - beta` weights the opposite side.
    pub beta: f64,
    /// Probability clamp applied inside the logarithms.
    pub epsilon: f64,
    /// Weight of the cross-entropy term in [`combined_loss`].
    pub weight_l1: f64,
    /// Weight of the Tversky term in [`combined_loss`].
    pub weight_l2: f64,
    /// Per-sample weight multiplying the combined loss.
    pub sample_weight: f64,
}

impl Default for LossParams {
    fn default() -> LossParams {
        LossParams {
            beta: 0.5,
            epsilon: 1e-7,
            weight_l1: 0.5,
            weight_l2: 0.5,
            sample_weight: 1.0,
        }
    }
}

impl LossParams {
    /// Settings used when training the left-ventricle localization stage.
    pub fn for_lv_stage() -> LossParams {
        LossParams { beta: 0.6, ..LossParams::default() }
    }

    /// Settings used when training the myocardium segmentation stage.
    pub fn for_myocardium_stage() -> LossParams {
        LossParams { beta: 0.4, ..LossParams::default() }
    }
}

fn check_pair(gt: &[f64], probs: &[f64]) -> Result<()> {
    if gt.len() != probs.len() {
        return Err(Error::Input(format!(
            "ground truth holds {} pixels but predictions hold {}",
            gt.len(),
            probs.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Input("loss over an empty pixel grid".into()));
    }
    Ok(())
}

/// Balanced binary cross-entropy.
///
/// Each foreground pixel contributes `-beta * ln(p_hat)` and each background
/// pixel `-(1 - beta) * ln(1 - p_hat)`, averaged over the grid, with `beta`
/// taken from [`LossParams`]. Probabilities are clamped to
/// `[epsilon, 1 - epsilon]` before the logarithms. At `beta = 1` an
/// all-background target yields a loss of exactly 0 regardless of the
/// prediction — degenerate but well defined.
pub fn balanced_bce(gt: &[f64], probs: &[f64], params: &LossParams) -> Result<f64> {
    check_pair(gt, probs)?;
    let beta = params.beta;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    let n = gt.len() as f64;
    let eps = params.epsilon;
    let mut acc = 0.0;
    for (&p, &ph) in gt.iter().zip(probs) {
        let ph = ph.clamp(eps, 1.0 - eps);
        acc += beta * p * ph.ln() + (1.0 - beta) * (1.0 - p) * (1.0 - ph).ln();
    }
    Ok(-acc / n)
}

/// Gradient of [`balanced_bce`] with respect to each prediction.
///
/// Predictions outside the clamp range sit on a plateau of the clamped loss,
/// so their gradient is exactly zero; this matches finite differences of
/// [`balanced_bce`] itself.
pub fn balanced_bce_grad(gt: &[f64], probs: &[f64], params: &LossParams) -> Result<Vec<f64>> {
    check_pair(gt, probs)?;
    let beta = params.beta;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    let n = gt.len() as f64;
    let eps = params.epsilon;
    let grad = gt
        .iter()
        .zip(probs)
        .map(|(&p, &ph)| {
            if ph < eps || ph > 1.0 - eps {
                0.0
            } else {
                -(beta * p / ph - (1.0 - beta) * (1.0 - p) / (1.0 - ph)) / n
            }
        })
        .collect();
    Ok(grad)
}

/// Tversky loss over soft counts.
///
/// With `TP = sum(p * p_hat)`, `FP = sum((1 - p) * p_hat)` and
/// `FN = sum(p * (1 - p_hat))`:
///
/// `l2 = 1 - 2*TP / (2*TP + beta*FP + (1 - beta)*FN)`.
///
/// `beta` above 0.5 punishes false positives harder, below 0.5 false
/// negatives. A vanishing denominator (no foreground on either side) is
/// treated as a perfect match and returns 0.
pub fn tversky(gt: &[f64], probs: &[f64], beta: f64) -> Result<f64> {
    check_pair(gt, probs)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &ph) in gt.iter().zip(probs) {
        tp += p * ph;
        fp += (1.0 - p) * ph;
        fn_ += p * (1.0 - ph);
    }
    let denom = 2.0 * tp + beta * fp + (1.0 - beta) * fn_;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * tp / denom)
}

/// Weighted combination of [`balanced_bce`] and [`tversky`], scaled by the
/// per-sample weight. At the default weights this is the plain mean
/// `(l1 + l2) / 2`.
pub fn combined_loss(gt: &[f64], probs: &[f64], params: &LossParams) -> Result<f64> {
    let l1 = balanced_bce(gt, probs, params)?;
    let l2 = tversky(gt, probs, params.beta)?;
    Ok((params.weight_l1 * l1 + params.weight_l2 * l2) * params.sample_weight)
}
