//! Evaluation and feature extraction: Dice overlap, boundary Hausdorff
//! distance in millimetres, the apex/middle/base slice partition,
//! left-ventricle volume, FWHM scar quantification and relative MSE.

use serde::{Deserialize, Serialize};

use crate::stack::{BinaryMask, IntensitySlice, VolumeStack};
use crate::{Error, Result};

/// Third of the kept slice range a slice falls into, apex-to-base order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionBucket {
    Apex,
    Middle,
    Base,
}

impl RegionBucket {
    pub const ALL: [RegionBucket; 3] = [RegionBucket::Apex, RegionBucket::Middle, RegionBucket::Base];
}

/// FWHM scar quantification of one slice.
///
/// `scar_pixel_count + gz_pixel_count` always equals the fibrosis pixel
/// count: every fibrosis pixel is scar (at or above the threshold) or gray
/// zone (below it). `degenerate` flags slices whose masked maximum
/// intensity is not positive, where the threshold loses meaning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarQuant {
    pub threshold_intensity: f64,
    pub scar_pixel_count: usize,
    pub scar_area_mm2: f64,
    pub gz_pixel_count: usize,
    pub gz_area_mm2: f64,
    pub degenerate: bool,
}

impl ScarQuant {
    fn zero() -> ScarQuant {
        ScarQuant {
            threshold_intensity: 0.0,
            scar_pixel_count: 0,
            scar_area_mm2: 0.0,
            gz_pixel_count: 0,
            gz_area_mm2: 0.0,
            degenerate: false,
        }
    }
}

/// Dice overlap `2|a∩b| / (|a|+|b|)`. Two empty masks agree perfectly and
/// score 1.0; an empty mask against a non-empty one scores 0.0.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Input(format!(
            "dice dimension mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let inter = a.pixels().iter().zip(b.pixels()).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with a background 8-neighbour (the image edge counts
/// as background).
fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (x, y) in mask.iter_set() {
        let mut on_boundary = false;
        'scan: for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if (dx, dy) == (0, 0) {
                    continue;
                }
                if !mask.get_signed(x as isize + dx, y as isize + dy) {
                    on_boundary = true;
                    break 'scan;
                }
            }
        }
        if on_boundary {
            out.push((x, y));
        }
    }
    out
}

/// Symmetric Hausdorff distance in millimetres between the boundaries of
/// two non-empty masks, Euclidean over pixel centers with anisotropic
/// spacing.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask, spacing_x: f64, spacing_y: f64) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Input(format!(
            "hausdorff dimension mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("hausdorff requires two non-empty masks".into()));
    }
    if !(spacing_x > 0.0 && spacing_y > 0.0) {
        return Err(Error::Input(format!("spacing must be positive, got {spacing_x}x{spacing_y}")));
    }
    let pa = boundary_pixels(a);
    let pb = boundary_pixels(b);
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut sup = 0.0f64;
        for &(x0, y0) in from {
            let mut inf = f64::INFINITY;
            for &(x1, y1) in to {
                let dx = (x0 as f64 - x1 as f64) * spacing_x;
                let dy = (y0 as f64 - y1 as f64) * spacing_y;
                inf = inf.min(dx * dx + dy * dy);
            }
            sup = sup.max(inf);
        }
        sup.sqrt()
    };
    Ok(directed(&pa, &pb).max(directed(&pb, &pa)))
}

/// Buckets a kept slice into the apex, middle or base third: indices below
/// `⌈n/3⌉` are apex, indices at or above `n − ⌊n/3⌋` are base, the rest
/// middle. Requires `slice_index < kept_count`.
pub fn region_of(slice_index: usize, kept_count: usize) -> RegionBucket {
    debug_assert!(slice_index < kept_count, "index {slice_index} outside kept range {kept_count}");
    let n = kept_count;
    if slice_index < n.div_ceil(3) {
        RegionBucket::Apex
    } else if slice_index >= n - n / 3 {
        RegionBucket::Base
    } else {
        RegionBucket::Middle
    }
}

/// Left-ventricle volume in mm³ under nearest-neighbour vertical
/// interpolation: each slice's myocardium-plus-blood-pool area extends half
/// a gap up and down (end slices outward too), so the total is
/// `Σ areaᵢ · gap`.
pub fn lv_volume(stack: &VolumeStack) -> Result<f64> {
    let sx = stack.px_spacing_x();
    let sy = stack.px_spacing_y();
    let gap = stack.slice_gap();
    let mut total = 0.0;
    for (i, slice) in stack.slices().iter().enumerate() {
        let mask = slice
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input(format!("slice {i} has no mask")))?;
        total += mask.left_ventricle().count() as f64 * sx * sy * gap;
    }
    Ok(total)
}

/// FWHM scar quantification: the threshold is half the maximum intensity
/// within the fibrosis mask, fibrosis pixels at or above it are scar and
/// the rest gray zone. An empty fibrosis mask yields zero counts.
pub fn fwhm_scar(image: &IntensitySlice, fibrosis: &BinaryMask) -> Result<ScarQuant> {
    if image.width() != fibrosis.width() || image.height() != fibrosis.height() {
        return Err(Error::Input(format!(
            "fwhm dimension mismatch: image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            fibrosis.width(),
            fibrosis.height()
        )));
    }
    if fibrosis.is_empty() {
        return Ok(ScarQuant::zero());
    }
    let max = fibrosis
        .iter_set()
        .map(|(x, y)| image.get(x, y))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.5 * max;
    let scar = fibrosis.iter_set().filter(|&(x, y)| image.get(x, y) >= threshold).count();
    let gz = fibrosis.count() - scar;
    let px_area = image.px_spacing_x() * image.px_spacing_y();
    Ok(ScarQuant {
        threshold_intensity: threshold,
        scar_pixel_count: scar,
        scar_area_mm2: scar as f64 * px_area,
        gz_pixel_count: gz,
        gz_area_mm2: gz as f64 * px_area,
        degenerate: max <= 0.0,
    })
}

/// Normalised root MSE `‖pred − gt‖₂ / ‖gt‖₂`.
pub fn relative_mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "relative_mse length mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let gt_norm = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gt_norm <= 0.0 {
        return Err(Error::Input("relative_mse requires a nonzero reference".into()));
    }
    let err = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        .sqrt();
    Ok(err / gt_norm)
}

/// Per-slice agreement between a predicted and a reference stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub index: usize,
    pub region: RegionBucket,
    /// Dice over blood pool + myocardium + fibrosis.
    pub dice_lv: f64,
    /// Dice over myocardium + fibrosis.
    pub dice_myo: f64,
    /// Myocardium boundary Hausdorff in mm; absent when either slice has no
    /// myocardium.
    pub hausdorff_mm: Option<f64>,
}

/// Mean agreement over the slices of one region bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub region: RegionBucket,
    pub count: usize,
    pub mean_dice_lv: Option<f64>,
    pub mean_dice_myo: Option<f64>,
    /// Mean over slices where the Hausdorff distance is defined.
    pub mean_hausdorff_mm: Option<f64>,
}

/// Stack-level evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackReport {
    pub slices: Vec<SliceMetrics>,
    pub buckets: Vec<BucketSummary>,
    pub volume_pred_mm3: f64,
    pub volume_gt_mm3: f64,
    /// `|pred − gt| / gt`; absent when the reference volume is zero and the
    /// prediction is not.
    pub volume_relative_error: Option<f64>,
    pub scar_pred_mm2: f64,
    pub scar_gt_mm2: f64,
    pub scar_relative_error: Option<f64>,
}

fn relative_error(pred: f64, gt: f64) -> Option<f64> {
    if gt > 0.0 {
        Some((pred - gt).abs() / gt)
    } else if pred == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates a predicted stack against an aligned reference stack:
/// per-slice left-ventricle and myocardium Dice, per-slice myocardium
/// boundary Hausdorff distance, apex/middle/base bucket summaries, and
/// stack-level volume and FWHM-scar relative errors. Metrics are computed
/// over exactly the slices present, so callers wanting the kept range only
/// should select slices first.
pub fn evaluate_stack(pred: &VolumeStack, gt: &VolumeStack) -> Result<StackReport> {
    if pred.len() != gt.len()
        || pred.width() != gt.width()
        || pred.height() != gt.height()
        || pred.px_spacing_x() != gt.px_spacing_x()
        || pred.px_spacing_y() != gt.px_spacing_y()
        || pred.slice_gap() != gt.slice_gap()
    {
        return Err(Error::Input("stacks are not aligned".into()));
    }
    let n = pred.len();
    let (sx, sy) = (pred.px_spacing_x(), pred.px_spacing_y());
    let mut slices = Vec::with_capacity(n);
    let mut scar_pred = 0.0;
    let mut scar_gt = 0.0;
    for i in 0..n {
        let ps = &pred.slices()[i];
        let gs = &gt.slices()[i];
        let pm = ps.mask.as_ref().ok_or_else(|| Error::Input(format!("pred slice {i} has no mask")))?;
        let gm = gs.mask.as_ref().ok_or_else(|| Error::Input(format!("gt slice {i} has no mask")))?;
        let (p_myo, g_myo) = (pm.myocardium(), gm.myocardium());
        let hausdorff_mm = if p_myo.is_empty() || g_myo.is_empty() {
            None
        } else {
            Some(hausdorff(&p_myo, &g_myo, sx, sy)?)
        };
        slices.push(SliceMetrics {
            index: i,
            region: region_of(i, n),
            dice_lv: dice(&pm.left_ventricle(), &gm.left_ventricle())?,
            dice_myo: dice(&p_myo, &g_myo)?,
            hausdorff_mm,
        });
        scar_pred += fwhm_scar(&ps.intensity, &pm.fibrosis())?.scar_area_mm2;
        scar_gt += fwhm_scar(&gs.intensity, &gm.fibrosis())?.scar_area_mm2;
    }
    let buckets = RegionBucket::ALL
        .iter()
        .map(|&region| {
            let in_bucket: Vec<&SliceMetrics> =
                slices.iter().filter(|s| s.region == region).collect();
            BucketSummary {
                region,
                count: in_bucket.len(),
                mean_dice_lv: mean(in_bucket.iter().map(|s| s.dice_lv)),
                mean_dice_myo: mean(in_bucket.iter().map(|s| s.dice_myo)),
                mean_hausdorff_mm: mean(in_bucket.iter().filter_map(|s| s.hausdorff_mm)),
            }
        })
        .collect();
    let volume_pred_mm3 = lv_volume(pred)?;
    let volume_gt_mm3 = lv_volume(gt)?;
    Ok(StackReport {
        slices,
        buckets,
        volume_relative_error: relative_error(volume_pred_mm3, volume_gt_mm3),
        volume_pred_mm3,
        volume_gt_mm3,
        scar_relative_error: relative_error(scar_pred, scar_gt),
        scar_pred_mm2: scar_pred,
        scar_gt_mm2: scar_gt,
    })
}
