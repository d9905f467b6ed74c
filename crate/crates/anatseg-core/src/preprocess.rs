//! Image standardization chain: window/rescale application, quarter-turn
//! rotation, CLAHE, centered crop-or-pad, per-slice byte scaling and the
//! blood-pool-median volume normalization.

use serde::{Deserialize, Serialize};

use crate::stack::{BinaryMask, IntensitySlice, SegMask, StackSlice, StudyMetadata, VolumeStack};
use crate::{Error, Result};

/// Default CLAHE tile grid used by the command-line tools.
pub const CLAHE_DEFAULT_TILES: usize = 8;
/// Default CLAHE clip limit used by the command-line tools.
pub const CLAHE_DEFAULT_CLIP: f64 = 2.0;

/// Applies the modality rescale and, when present, the display window.
///
/// Every raw value `v` becomes `v' = v * rescale_slope + rescale_intercept`.
/// With a window `(c, w)` the display value is the linear ramp
/// `255 * clamp((v' - (c - w/2)) / w, 0, 1)`; without one, `v'` is returned
/// unchanged.
pub fn apply_window(slice: &IntensitySlice, meta: &StudyMetadata) -> Result<IntensitySlice> {
    let window = match (meta.window_center, meta.window_width) {
        (Some(c), Some(w)) => {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Parameter(format!(
                    "window width must be positive and finite, got {w}"
                )));
            }
            Some((c, w))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Parameter(
                "window_center and window_width must both be present or both absent".into(),
            ))
        }
    };
    slice.map(|v| {
        let v = v * meta.rescale_slope + meta.rescale_intercept;
        match window {
            Some((c, w)) => 255.0 * ((v - (c - w / 2.0)) / w).clamp(0.0, 1.0),
            None => v,
        }
    })
}

fn check_turns(k: u8) -> Result<usize> {
    if k > 3 {
        return Err(Error::Parameter(format!("quarter turns must lie in 0..=3, got {k}")));
    }
    Ok(k as usize)
}

/// One counterclockwise quarter turn of a row-major buffer.
fn rotate_once<T: Copy>(data: &[T], width: usize, height: usize) -> Vec<T> {
    // The rightmost input column becomes the top output row:
    // out(x', y') = in(width - 1 - y', x').
    let mut out = Vec::with_capacity(data.len());
    for y in 0..width {
        for x in 0..height {
            out.push(data[x * width + (width - 1 - y)]);
        }
    }
    out
}

/// Rotates a slice counterclockwise by `k` quarter turns. Pixel spacings
/// swap when `k` is odd.
pub fn quarter_rotate_slice(slice: &IntensitySlice, k: u8) -> Result<IntensitySlice> {
    let k = check_turns(k)?;
    let mut data = slice.data().to_vec();
    let (mut w, mut h) = (slice.width(), slice.height());
    for _ in 0..k {
        data = rotate_once(&data, w, h);
        std::mem::swap(&mut w, &mut h);
    }
    let (sx, sy) = if k % 2 == 1 {
        (slice.px_spacing_y(), slice.px_spacing_x())
    } else {
        (slice.px_spacing_x(), slice.px_spacing_y())
    };
    IntensitySlice::new(w, h, data, sx, sy)
}

/// Rotates a label mask counterclockwise by `k` quarter turns.
pub fn quarter_rotate_mask(mask: &SegMask, k: u8) -> Result<SegMask> {
    let k = check_turns(k)?;
    let mut labels = mask.labels().to_vec();
    let (mut w, mut h) = (mask.width(), mask.height());
    for _ in 0..k {
        labels = rotate_once(&labels, w, h);
        std::mem::swap(&mut w, &mut h);
    }
    SegMask::new(w, h, labels)
}

/// Contrast-limited adaptive histogram equalization.
///
/// Intensities are binned into 256 levels across the slice's own range. Each
/// tile of the `tiles_x` x `tiles_y` grid gets its histogram clipped at
/// `max(1, clip_limit * tile_area / 256)` with the excess redistributed
/// uniformly (single pass), then equalized; pixels are remapped by bilinear
/// interpolation between the mappings of the four surrounding tile centers.
/// Output lies in `[0, 255]`. A constant slice is returned unchanged.
pub fn clahe(
    slice: &IntensitySlice,
    tiles_x: usize,
    tiles_y: usize,
    clip_limit: f64,
) -> Result<IntensitySlice> {
    let (w, h) = (slice.width(), slice.height());
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::Parameter("CLAHE needs at least a 1x1 tile grid".into()));
    }
    if tiles_x > w || tiles_y > h {
        return Err(Error::Parameter(format!(
            "CLAHE tile grid {tiles_x}x{tiles_y} exceeds the {w}x{h} image"
        )));
    }
    if !(clip_limit.is_finite() && clip_limit > 0.0) {
        return Err(Error::Parameter(format!("clip limit must be positive, got {clip_limit}")));
    }
    let data = slice.data();
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(slice.clone());
    }
    let bin_of = |v: f64| -> usize { (((v - lo) / (hi - lo) * 256.0) as usize).min(255) };
    let bins: Vec<usize> = data.iter().map(|&v| bin_of(v)).collect();

    // Tile boundaries: tile i spans [edges[i], edges[i+1]).
    let edges = |n: usize, t: usize| -> Vec<usize> { (0..=t).map(|i| i * n / t).collect() };
    let x_edges = edges(w, tiles_x);
    let y_edges = edges(h, tiles_y);

    // Per-tile equalization mappings, bin -> display value.
    let mut maps = vec![vec![0.0f64; 256]; tiles_x * tiles_y];
    for tj in 0..tiles_y {
        for ti in 0..tiles_x {
            let (x0, x1) = (x_edges[ti], x_edges[ti + 1]);
            let (y0, y1) = (y_edges[tj], y_edges[tj + 1]);
            let area = (x1 - x0) * (y1 - y0);
            let mut hist = [0u64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bins[y * w + x]] += 1;
                }
            }
            let clip = ((clip_limit * area as f64 / 256.0) as u64).max(1);
            let mut excess = 0u64;
            for count in hist.iter_mut() {
                if *count > clip {
                    excess += *count - clip;
                    *count = clip;
                }
            }
            let share = excess / 256;
            let rem = (excess % 256) as usize;
            for (b, count) in hist.iter_mut().enumerate() {
                *count += share + u64::from(b < rem);
            }
            let map = &mut maps[tj * tiles_x + ti];
            let mut cdf = 0u64;
            for b in 0..256 {
                cdf += hist[b];
                map[b] = 255.0 * cdf as f64 / area as f64;
            }
        }
    }

    // Tile-center positions along each axis, plus per-pixel interpolation
    // weights. Pixels beyond the outermost centers clamp to the edge tile.
    let centers = |e: &[usize]| -> Vec<f64> {
        e.windows(2).map(|p| (p[0] + p[1] - 1) as f64 / 2.0).collect()
    };
    let weights = |n: usize, c: &[f64]| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|p| {
                let p = p as f64;
                if p <= c[0] {
                    (0, 0, 0.0)
                } else if p >= c[c.len() - 1] {
                    (c.len() - 1, c.len() - 1, 0.0)
                } else {
                    let i = c.iter().rposition(|&cv| cv <= p).unwrap();
                    let i1 = (i + 1).min(c.len() - 1);
                    let t = if i1 == i { 0.0 } else { (p - c[i]) / (c[i1] - c[i]) };
                    (i, i1, t)
                }
            })
            .collect()
    };
    let wx = weights(w, &centers(&x_edges));
    let wy = weights(h, &centers(&y_edges));

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (j0, j1, ty) = wy[y];
        for x in 0..w {
            let (i0, i1, tx) = wx[x];
            let b = bins[y * w + x];
            let m00 = maps[j0 * tiles_x + i0][b];
            let m01 = maps[j0 * tiles_x + i1][b];
            let m10 = maps[j1 * tiles_x + i0][b];
            let m11 = maps[j1 * tiles_x + i1][b];
            let top = m00 + (m01 - m00) * tx;
            let bottom = m10 + (m11 - m10) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    slice.with_data(out)
}

/// Centering offsets recorded by [`crop_or_pad_slice`] / [`crop_or_pad_mask`]
/// so the original interior can be restored after processing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPad {
    pub src_width: usize,
    pub src_height: usize,
    pub size: usize,
    /// Top-left corner of the copied window inside the source.
    pub src_x: usize,
    pub src_y: usize,
    /// Top-left corner of the copied window inside the output square.
    pub dst_x: usize,
    pub dst_y: usize,
    pub copy_width: usize,
    pub copy_height: usize,
}

impl CropPad {
    fn plan(src_width: usize, src_height: usize, size: usize) -> CropPad {
        let axis = |n: usize| -> (usize, usize, usize) {
            if n >= size {
                ((n - size) / 2, 0, size)
            } else {
                (0, (size - n) / 2, n)
            }
        };
        let (src_x, dst_x, copy_width) = axis(src_width);
        let (src_y, dst_y, copy_height) = axis(src_height);
        CropPad { src_width, src_height, size, src_x, src_y, dst_x, dst_y, copy_width, copy_height }
    }

    /// Pixels of the output square that were copied from the source (the
    /// complement is padding).
    pub fn interior_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |x, y| {
            x >= self.dst_x
                && x < self.dst_x + self.copy_width
                && y >= self.dst_y
                && y < self.dst_y + self.copy_height
        })
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if width != self.size || height != self.size {
            return Err(Error::Input(format!(
                "expected a {0}x{0} grid to invert, got {width}x{height}",
                self.size
            )));
        }
        Ok(())
    }

    /// Restores the source geometry, zero-filling whatever the crop removed.
    /// The surviving interior is restored exactly.
    pub fn invert_slice(&self, slice: &IntensitySlice) -> Result<IntensitySlice> {
        self.check_dims(slice.width(), slice.height())?;
        let mut data = vec![0.0; self.src_width * self.src_height];
        for dy in 0..self.copy_height {
            for dx in 0..self.copy_width {
                data[(self.src_y + dy) * self.src_width + (self.src_x + dx)] =
                    slice.get(self.dst_x + dx, self.dst_y + dy);
            }
        }
        IntensitySlice::new(
            self.src_width,
            self.src_height,
            data,
            slice.px_spacing_x(),
            slice.px_spacing_y(),
        )
    }

    /// Mask counterpart of [`CropPad::invert_slice`]; removed pixels become
    /// background.
    pub fn invert_mask(&self, mask: &SegMask) -> Result<SegMask> {
        self.check_dims(mask.width(), mask.height())?;
        let mut labels = vec![0u8; self.src_width * self.src_height];
        for dy in 0..self.copy_height {
            for dx in 0..self.copy_width {
                labels[(self.src_y + dy) * self.src_width + (self.src_x + dx)] =
                    mask.labels()[(self.dst_y + dy) * mask.width() + (self.dst_x + dx)];
            }
        }
        SegMask::new(self.src_width, self.src_height, labels)
    }
}

/// Center-crops and/or zero-pads a slice to `size` x `size`, returning the
/// recorded offsets for inversion.
pub fn crop_or_pad_slice(slice: &IntensitySlice, size: usize) -> Result<(IntensitySlice, CropPad)> {
    if size == 0 {
        return Err(Error::Parameter("crop/pad target size must be positive".into()));
    }
    let plan = CropPad::plan(slice.width(), slice.height(), size);
    let mut data = vec![0.0; size * size];
    for dy in 0..plan.copy_height {
        for dx in 0..plan.copy_width {
            data[(plan.dst_y + dy) * size + (plan.dst_x + dx)] =
                slice.get(plan.src_x + dx, plan.src_y + dy);
        }
    }
    let out = IntensitySlice::new(size, size, data, slice.px_spacing_x(), slice.px_spacing_y())?;
    Ok((out, plan))
}

/// Mask counterpart of [`crop_or_pad_slice`]; padding is background.
pub fn crop_or_pad_mask(mask: &SegMask, size: usize) -> Result<(SegMask, CropPad)> {
    if size == 0 {
        return Err(Error::Parameter("crop/pad target size must be positive".into()));
    }
    let plan = CropPad::plan(mask.width(), mask.height(), size);
    let mut labels = vec![0u8; size * size];
    for dy in 0..plan.copy_height {
        for dx in 0..plan.copy_width {
            labels[(plan.dst_y + dy) * size + (plan.dst_x + dx)] =
                mask.labels()[(plan.src_y + dy) * mask.width() + (plan.src_x + dx)];
        }
    }
    Ok((SegMask::new(size, size, labels)?, plan))
}

/// Linearly rescales region intensities to span `[0, 255]`; pixels outside
/// the region (typically padding) are set to 0. A constant region maps to
/// all zeros rather than dividing by zero.
pub fn scale_to_byte_range(slice: &IntensitySlice, region: &BinaryMask) -> Result<IntensitySlice> {
    if region.width() != slice.width() || region.height() != slice.height() {
        return Err(Error::Input(format!(
            "region is {}x{} but the slice is {}x{}",
            region.width(),
            region.height(),
            slice.width(),
            slice.height()
        )));
    }
    if region.is_empty() {
        return Err(Error::Input("scaling region is empty".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in region.iter_set() {
        let v = slice.get(x, y);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data = slice
        .data()
        .iter()
        .zip(region.pixels())
        .map(|(&v, &inside)| {
            if !inside || hi == lo {
                0.0
            } else {
                255.0 * (v - lo) / (hi - lo)
            }
        })
        .collect();
    slice.with_data(data)
}

/// Median of the blood-pool intensities across a whole volume, when any
/// blood-pool label exists.
pub fn bloodpool_median(stack: &VolumeStack) -> Option<f64> {
    let mut values = Vec::new();
    for slice in stack.slices() {
        if let Some(mask) = &slice.mask {
            for (x, y) in mask.blood_pool().iter_set() {
                values.push(slice.intensity.get(x, y));
            }
        }
    }
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Effective region and blood-pool median driving
/// [`normalize_by_bloodpool_median`].
#[derive(Clone, Debug)]
pub struct NormalizationContext {
    region: BinaryMask,
    bp_median: f64,
}

impl NormalizationContext {
    /// Builds a context from an explicit median, for volumes without
    /// blood-pool labels.
    pub fn new(region: BinaryMask, bp_median: f64) -> Result<NormalizationContext> {
        if region.is_empty() {
            return Err(Error::Input("normalization region is empty".into()));
        }
        if !(bp_median.is_finite() && bp_median > 0.0) {
            return Err(Error::Parameter(format!(
                "blood-pool median must be positive, got {bp_median}"
            )));
        }
        Ok(NormalizationContext { region, bp_median })
    }

    /// Computes the median from the volume's own blood-pool labels.
    pub fn from_volume(stack: &VolumeStack, region: BinaryMask) -> Result<NormalizationContext> {
        let m = bloodpool_median(stack)
            .ok_or_else(|| Error::Input("volume has no blood-pool labels".into()))?;
        NormalizationContext::new(region, m)
    }

    pub fn region(&self) -> &BinaryMask {
        &self.region
    }

    pub fn bp_median(&self) -> f64 {
        self.bp_median
    }
}

/// Applies the three normalization maps in order to every pixel of the
/// volume:
///
/// 1. `I -> I / (2m)` with `m` the blood-pool median;
/// 2. `I -> 255 * (I - min) / (max - min)` with min/max taken over the
///    region pixels of the whole volume, so slices stay mutually comparable;
/// 3. `I -> clamp(I, 0, 255)`.
///
/// Masks, spacing and slice gap are carried through unchanged.
pub fn normalize_by_bloodpool_median(
    stack: &VolumeStack,
    ctx: &NormalizationContext,
) -> Result<VolumeStack> {
    let region = &ctx.region;
    if region.width() != stack.width() || region.height() != stack.height() {
        return Err(Error::Input(format!(
            "region is {}x{} but the volume is {}x{}",
            region.width(),
            region.height(),
            stack.width(),
            stack.height()
        )));
    }
    let m = ctx.bp_median;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for slice in stack.slices() {
        for (x, y) in region.iter_set() {
            let v = slice.intensity.get(x, y) / (2.0 * m);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi == lo {
        return Err(Error::DegenerateRegion(format!(
            "normalization region is constant at {lo}"
        )));
    }
    let mut slices = Vec::with_capacity(stack.len());
    for slice in stack.slices() {
        let data = slice
            .intensity
            .data()
            .iter()
            .map(|&v| {
                let v = v / (2.0 * m);
                (255.0 * (v - lo) / (hi - lo)).clamp(0.0, 255.0)
            })
            .collect();
        slices.push(StackSlice {
            intensity: slice.intensity.with_data(data)?,
            mask: slice.mask.clone(),
        });
    }
    VolumeStack::new(slices, stack.slice_gap(), stack.orientation_turns())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn slice_from(w: usize, h: usize, data: Vec<f64>) -> IntensitySlice {
        IntensitySlice::new(w, h, data, 1.0, 1.0).unwrap()
    }

    #[test]
    fn window_identity_without_window() {
        let s = slice_from(2, 2, vec![3.0, -1.0, 4.0, 1.5]);
        let out = apply_window(&s, &StudyMetadata::default()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn window_linear_ramp() {
        // raw 100 under slope 2 / intercept -10 lands on the window center
        // 190 with width 100, i.e. halfway up the ramp: 127.5.
        let s = slice_from(1, 1, vec![100.0]);
        let meta = StudyMetadata {
            rescale_slope: 2.0,
            rescale_intercept: -10.0,
            window_center: Some(190.0),
            window_width: Some(100.0),
            ..StudyMetadata::default()
        };
        let out = apply_window(&s, &meta).unwrap();
        assert!((out.get(0, 0) - 127.5).abs() < 1e-12);
    }

    #[test]
    fn window_clamps_below_floor() {
        let meta = StudyMetadata {
            window_center: Some(190.0),
            window_width: Some(100.0),
            ..StudyMetadata::default()
        };
        // Anything at or below c - w/2 = 140 maps to 0.
        let s = slice_from(3, 1, vec![140.0, 20.0, -500.0]);
        let out = apply_window(&s, &meta).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_rejects_bad_width() {
        let meta = StudyMetadata {
            window_center: Some(190.0),
            window_width: Some(0.0),
            ..StudyMetadata::default()
        };
        assert!(apply_window(&slice_from(1, 1, vec![0.0]), &meta).is_err());
    }

    #[test]
    fn rotate_hand_case() {
        // [[1,2,3],[4,5,6]] turned counterclockwise once is
        // [[3,6],[2,5],[1,4]].
        let s = IntensitySlice::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.5, 2.0).unwrap();
        let r = quarter_rotate_slice(&s, 1).unwrap();
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(r.data(), &[3.0, 6.0, 2.0, 5.0, 1.0, 4.0]);
        // Spacings swap on odd turns.
        assert_eq!((r.px_spacing_x(), r.px_spacing_y()), (2.0, 0.5));
    }

    #[test]
    fn rotate_identity_and_involution() {
        let s = slice_from(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(quarter_rotate_slice(&s, 0).unwrap(), s);
        let twice = quarter_rotate_slice(&quarter_rotate_slice(&s, 2).unwrap(), 2).unwrap();
        assert_eq!(twice, s);
        let full = (0..4).fold(s.clone(), |acc, _| quarter_rotate_slice(&acc, 1).unwrap());
        assert_eq!(full, s);
        assert!(quarter_rotate_slice(&s, 4).is_err());
    }

    #[test]
    fn rotate_mask_preserves_label_multiset() {
        let mask = SegMask::new(4, 2, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let r = quarter_rotate_mask(&mask, 1).unwrap();
        assert_eq!((r.width(), r.height()), (2, 4));
        assert_eq!(r.histogram(), mask.histogram());
        let back = quarter_rotate_mask(&r, 3).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn clahe_constant_image_unchanged() {
        let s = slice_from(8, 8, vec![42.0; 64]);
        assert_eq!(clahe(&s, 2, 2, 2.0).unwrap(), s);
    }

    #[test]
    fn clahe_output_in_byte_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let data: Vec<f64> = (0..24 * 20).map(|_| rng.gen_range(-500.0..3000.0)).collect();
            let s = slice_from(24, 20, data);
            let out = clahe(&s, 4, 2, 2.0).unwrap();
            for &v in out.data() {
                assert!((0.0..=255.0).contains(&v), "CLAHE produced {v}");
            }
        }
    }

    #[test]
    fn clahe_single_tile_huge_clip_is_global_equalization() {
        // With one tile and an unreachable clip limit, CLAHE reduces to
        // plain histogram equalization; compare against an independent
        // implementation of that.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..100.0)).collect();
        let s = slice_from(16, 16, data.clone());
        let out = clahe(&s, 1, 1, 1e9).unwrap();

        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bin = |v: f64| (((v - lo) / (hi - lo) * 256.0) as usize).min(255);
        let mut hist = [0u64; 256];
        for &v in &data {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for b in 0..256 {
            acc += hist[b];
            cdf[b] = acc;
        }
        for (i, &v) in data.iter().enumerate() {
            let expected = 255.0 * cdf[bin(v)] as f64 / data.len() as f64;
            assert!(
                (out.data()[i] - expected).abs() < 1e-9,
                "pixel {i}: {} vs global equalization {expected}",
                out.data()[i]
            );
        }
    }

    #[test]
    fn clahe_rejects_oversized_tile_grid() {
        let s = slice_from(4, 4, (0..16).map(f64::from).collect());
        assert!(clahe(&s, 5, 1, 2.0).is_err());
        assert!(clahe(&s, 0, 1, 2.0).is_err());
        assert!(clahe(&s, 2, 2, 0.0).is_err());
    }

    #[test]
    fn crop_or_pad_identity() {
        let s = slice_from(4, 4, (0..16).map(f64::from).collect());
        let (out, plan) = crop_or_pad_slice(&s, 4).unwrap();
        assert_eq!(out, s);
        assert_eq!(plan.interior_mask().count(), 16);
    }

    #[test]
    fn crop_or_pad_offsets_for_mixed_case() {
        // 200 wide is cropped by (200-192)/2 = 4; 180 tall is padded by
        // (192-180)/2 = 6.
        let s = slice_from(200, 180, vec![1.0; 200 * 180]);
        let (out, plan) = crop_or_pad_slice(&s, 192).unwrap();
        assert_eq!((out.width(), out.height()), (192, 192));
        assert_eq!((plan.src_x, plan.dst_x, plan.copy_width), (4, 0, 192));
        assert_eq!((plan.src_y, plan.dst_y, plan.copy_height), (0, 6, 180));
        // Padding rows are zero, interior is intact.
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 5), 0.0);
        assert_eq!(out.get(0, 6), 1.0);
        assert_eq!(out.get(191, 185), 1.0);
        assert_eq!(out.get(0, 186), 0.0);
    }

    #[test]
    fn crop_or_pad_mask_pads_with_background() {
        let mask = SegMask::new(2, 2, vec![1, 2, 3, 1]).unwrap();
        let (out, _) = crop_or_pad_mask(&mask, 4).unwrap();
        let hist = out.histogram();
        assert_eq!(hist, [12, 2, 1, 1]);
        assert_eq!(out.label_at(1, 1).as_u8(), 1);
    }

    #[test]
    fn crop_or_pad_inverse_restores_interior() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for &(w, h, size) in &[(10usize, 6usize, 8usize), (5, 9, 7), (8, 8, 12), (13, 4, 4)] {
            let data: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..10.0)).collect();
            let s = slice_from(w, h, data);
            let (cropped, plan) = crop_or_pad_slice(&s, size).unwrap();
            let restored = plan.invert_slice(&cropped).unwrap();
            assert_eq!((restored.width(), restored.height()), (w, h));
            for dy in 0..plan.copy_height {
                for dx in 0..plan.copy_width {
                    assert_eq!(
                        restored.get(plan.src_x + dx, plan.src_y + dy),
                        s.get(plan.src_x + dx, plan.src_y + dy),
                        "interior pixel changed for {w}x{h} -> {size}"
                    );
                }
            }
        }
    }

    #[test]
    fn scale_to_byte_range_hand_case() {
        let s = slice_from(3, 1, vec![10.0, 20.0, 30.0]);
        let region = BinaryMask::from_fn(3, 1, |_, _| true);
        let out = scale_to_byte_range(&s, &region).unwrap();
        assert_eq!(out.data(), &[0.0, 127.5, 255.0]);
    }

    #[test]
    fn scale_to_byte_range_zeroes_outside_and_constant() {
        let s = slice_from(4, 1, vec![10.0, 20.0, 30.0, 999.0]);
        let region = BinaryMask::from_fn(4, 1, |x, _| x < 3);
        let out = scale_to_byte_range(&s, &region).unwrap();
        assert_eq!(out.data()[3], 0.0);
        assert_eq!(out.data()[2], 255.0);

        let constant = slice_from(2, 1, vec![5.0, 5.0]);
        let region = BinaryMask::from_fn(2, 1, |_, _| true);
        assert_eq!(
            scale_to_byte_range(&constant, &region).unwrap().data(),
            &[0.0, 0.0]
        );

        let empty = BinaryMask::empty(2, 1);
        assert!(scale_to_byte_range(&constant, &empty).is_err());
    }

    #[test]
    fn scale_to_byte_range_identity_when_already_spanning() {
        let s = slice_from(3, 1, vec![0.0, 100.0, 255.0]);
        let region = BinaryMask::from_fn(3, 1, |_, _| true);
        let out = scale_to_byte_range(&s, &region).unwrap();
        assert_eq!(out.data(), s.data());
    }

    fn single_slice_volume(s: IntensitySlice) -> VolumeStack {
        VolumeStack::new(vec![StackSlice { intensity: s, mask: None }], 8.0, 0).unwrap()
    }

    #[test]
    fn normalize_hand_case() {
        // {0, 50, 100} with m = 50: step 1 gives {0, 0.5, 1}, step 2
        // stretches to {0, 127.5, 255}, the clamp changes nothing.
        let stack = single_slice_volume(slice_from(3, 1, vec![0.0, 50.0, 100.0]));
        let region = BinaryMask::from_fn(3, 1, |_, _| true);
        let ctx = NormalizationContext::new(region, 50.0).unwrap();
        let out = normalize_by_bloodpool_median(&stack, &ctx).unwrap();
        assert_eq!(out.slices()[0].intensity.data(), &[0.0, 127.5, 255.0]);
    }

    #[test]
    fn normalize_output_in_byte_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..36).map(|_| rng.gen_range(-100.0..4000.0)).collect();
        let stack = single_slice_volume(slice_from(6, 6, data));
        // A small region leaves plenty of out-of-region pixels to clamp.
        let region = BinaryMask::from_fn(6, 6, |x, y| (2..4).contains(&x) && (2..4).contains(&y));
        let ctx = NormalizationContext::new(region, 120.0).unwrap();
        let out = normalize_by_bloodpool_median(&stack, &ctx).unwrap();
        for &v in out.slices()[0].intensity.data() {
            assert!((0.0..=255.0).contains(&v));
        }
    }

    #[test]
    fn normalize_invariant_under_joint_rescaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..20 {
            let data: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..500.0)).collect();
            let m = rng.gen_range(10.0..300.0);
            let factor = rng.gen_range(0.01..50.0);
            let region = BinaryMask::from_fn(5, 5, |x, y| (x + y) % 2 == 0);
            let base = single_slice_volume(slice_from(5, 5, data.clone()));
            let scaled = single_slice_volume(slice_from(
                5,
                5,
                data.iter().map(|&v| v * factor).collect(),
            ));
            let out_a = normalize_by_bloodpool_median(
                &base,
                &NormalizationContext::new(region.clone(), m).unwrap(),
            );
            let out_b = normalize_by_bloodpool_median(
                &scaled,
                &NormalizationContext::new(region, m * factor).unwrap(),
            );
            match (out_a, out_b) {
                (Ok(a), Ok(b)) => {
                    for (va, vb) in a.slices()[0]
                        .intensity
                        .data()
                        .iter()
                        .zip(b.slices()[0].intensity.data())
                    {
                        assert!((va - vb).abs() <= 1e-9 * va.abs().max(1.0));
                    }
                }
                (Err(_), Err(_)) => {}
                other => panic!("rescaling changed the outcome: {other:?}"),
            }
        }
    }

    #[test]
    fn normalize_error_cases() {
        let stack = single_slice_volume(slice_from(2, 1, vec![5.0, 5.0]));
        let region = BinaryMask::from_fn(2, 1, |_, _| true);
        assert!(NormalizationContext::new(region.clone(), 0.0).is_err());
        assert!(NormalizationContext::new(BinaryMask::empty(2, 1), 1.0).is_err());
        let ctx = NormalizationContext::new(region, 50.0).unwrap();
        assert!(matches!(
            normalize_by_bloodpool_median(&stack, &ctx),
            Err(Error::DegenerateRegion(_))
        ));
    }

    #[test]
    fn bloodpool_median_over_volume() {
        let mask = SegMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let slices = vec![
            StackSlice {
                intensity: slice_from(2, 2, vec![10.0, 20.0, 0.0, 0.0]),
                mask: Some(mask.clone()),
            },
            StackSlice {
                intensity: slice_from(2, 2, vec![30.0, 40.0, 0.0, 0.0]),
                mask: Some(mask),
            },
        ];
        let stack = VolumeStack::new(slices, 8.0, 0).unwrap();
        // Values {10, 20, 30, 40}: even count, median 25.
        assert_eq!(bloodpool_median(&stack), Some(25.0));
        let ctx = NormalizationContext::from_volume(
            &stack,
            BinaryMask::from_fn(2, 2, |_, _| true),
        )
        .unwrap();
        assert_eq!(ctx.bp_median(), 25.0);
    }
}
