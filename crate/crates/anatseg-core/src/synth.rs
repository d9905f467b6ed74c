//! Cine-to-pseudo-LGE synthesis: grows a connected pseudo-scar inside the
//! myocardium, brightens it toward blood-pool intensity, matches the result
//! to a reference enhanced image and adds speckle noise. The sampled scar is
//! returned unblurred so it stays usable as training ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::stack::{BinaryMask, IntensitySlice, Label, SegMask};
use crate::{Error, Result};

/// Derives an independent stream seed from a base seed; used to split one
/// user-facing seed into per-stage and per-sample seeds.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over the combined value; cheap and well mixed.
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Knobs of the synthesis pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Fraction of myocardium pixels converted to pseudo-scar, in `[0, 1]`.
    pub scar_fraction: f64,
    /// Gaussian blur applied to the scar mask before overlay, in pixels.
    pub blur_sigma: f64,
    /// Overlay strength: 1 pulls scar pixels all the way to blood-pool
    /// brightness, 0 disables the overlay.
    pub enhancement_gain: f64,
    /// Standard deviation of the multiplicative speckle noise.
    pub speckle_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SynthParams {
    fn default() -> SynthParams {
        SynthParams {
            scar_fraction: 0.2,
            blur_sigma: 1.5,
            enhancement_gain: 1.0,
            speckle_sigma: 0.08,
            rng_seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.scar_fraction) {
            return Err(Error::Parameter(format!(
                "scar_fraction must lie in [0, 1], got {}",
                self.scar_fraction
            )));
        }
        for (name, v) in [
            ("blur_sigma", self.blur_sigma),
            ("enhancement_gain", self.enhancement_gain),
            ("speckle_sigma", self.speckle_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Grows a connected pseudo-scar of exactly `round(fraction * |myocardium|)`
/// pixels by randomized region growing from a random myocardium seed pixel.
///
/// Growth pops a uniformly random pixel from the current frontier, so blobs
/// come out irregular rather than disk-shaped. If the seed's connected
/// component is exhausted before the target count is reached (only possible
/// on fragmented myocardium), growth restarts from a fresh random pixel.
/// Deterministic per seed.
pub fn sample_pseudo_scar(myo: &SegMask, fraction: f64, seed: u64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let region = myo.myocardium();
    let candidates: Vec<(usize, usize)> = region.iter_set().collect();
    if candidates.is_empty() {
        return Err(Error::Input("mask contains no myocardium pixels".into()));
    }
    let target = (fraction * candidates.len() as f64).round() as usize;
    let (w, h) = (region.width(), region.height());
    let mut scar = BinaryMask::empty(w, h);
    if target == 0 {
        return Ok(scar);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut visited = vec![false; w * h];
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    let mut grown = 0usize;
    while grown < target {
        if frontier.is_empty() {
            // Initial seed, or a forced restart on fragmented myocardium.
            let remaining: Vec<(usize, usize)> = candidates
                .iter()
                .copied()
                .filter(|&(x, y)| !visited[y * w + x])
                .collect();
            let &(x, y) = &remaining[rng.gen_range(0..remaining.len())];
            visited[y * w + x] = true;
            frontier.push((x, y));
        }
        let (x, y) = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        scar.set(x, y, true);
        grown += 1;
        let (xi, yi) = (x as isize, y as isize);
        for (nx, ny) in [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)] {
            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if region.get(nx, ny) && !visited[ny * w + nx] {
                visited[ny * w + nx] = true;
                frontier.push((nx, ny));
            }
        }
    }
    Ok(scar)
}

/// Reflects an out-of-range index back into `0..n` (edge pixels included in
/// the mirror).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_buffer(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    // Horizontal pass.
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w);
                acc += kw * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h);
                acc += kw * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable Gaussian convolution with kernel radius `ceil(3*sigma)` and
/// reflective borders; `sigma = 0` is the identity.
pub fn gaussian_blur(slice: &IntensitySlice, sigma: f64) -> Result<IntensitySlice> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Parameter(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(slice.clone());
    }
    slice.with_data(blur_buffer(slice.data(), slice.width(), slice.height(), sigma))
}

/// Quantile mapping of `src` intensities onto the distribution of
/// `reference`, over 256 bins spanning each image's own range. Output values
/// are reference bin centers, so a round trip onto itself is exact up to one
/// bin width.
pub fn histogram_match(src: &IntensitySlice, reference: &IntensitySlice) -> IntensitySlice {
    let ref_data = reference.data();
    let ref_lo = ref_data.iter().cloned().fold(f64::INFINITY, f64::min);
    let ref_hi = ref_data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if ref_hi == ref_lo {
        // Constant reference: everything maps to that value.
        return src.map(|_| ref_lo).expect("constant is finite");
    }
    let src_data = src.data();
    let src_lo = src_data.iter().cloned().fold(f64::INFINITY, f64::min);
    let src_hi = src_data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bin_of = |v: f64, lo: f64, hi: f64| -> usize {
        if hi == lo {
            255
        } else {
            (((v - lo) / (hi - lo) * 256.0) as usize).min(255)
        }
    };
    let mut src_hist = [0u64; 256];
    for &v in src_data {
        src_hist[bin_of(v, src_lo, src_hi)] += 1;
    }
    let mut ref_hist = [0u64; 256];
    for &v in ref_data {
        ref_hist[bin_of(v, ref_lo, ref_hi)] += 1;
    }
    let cdf = |hist: &[u64; 256], n: usize| -> [f64; 256] {
        let mut out = [0.0; 256];
        let mut acc = 0u64;
        for b in 0..256 {
            acc += hist[b];
            out[b] = acc as f64 / n as f64;
        }
        out
    };
    let src_cdf = cdf(&src_hist, src_data.len());
    let ref_cdf = cdf(&ref_hist, ref_data.len());
    // For each source bin, the smallest reference bin whose CDF reaches the
    // source quantile; evaluated at reference bin centers.
    let bin_width = (ref_hi - ref_lo) / 256.0;
    let mut lookup = [0.0f64; 256];
    let mut rb = 0usize;
    for b in 0..256 {
        while rb < 255 && ref_cdf[rb] < src_cdf[b] {
            rb += 1;
        }
        lookup[b] = ref_lo + (rb as f64 + 0.5) * bin_width;
    }
    src.map(|v| lookup[bin_of(v, src_lo, src_hi)]).expect("bin centers are finite")
}

/// Multiplicative speckle: `out = clamp(I * (1 + n), 0, 255)` with
/// `n ~ Normal(0, sigma^2)` i.i.d. per pixel in row-major order;
/// deterministic per seed, identity for `sigma = 0`.
pub fn speckle_noise(slice: &IntensitySlice, sigma: f64, seed: u64) -> Result<IntensitySlice> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Parameter(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(slice.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Parameter(format!("invalid speckle sigma {sigma}: {e}")))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data = slice
        .data()
        .iter()
        .map(|&v| (v * (1.0 + normal.sample(&mut rng))).clamp(0.0, 255.0))
        .collect();
    slice.with_data(data)
}

/// Blends scar pixels toward blood-pool brightness:
/// `I' = I + gain * weight * (bp_ref - I)` per pixel, with `weight` the
/// blurred scar mask. Pixels with zero weight are untouched.
pub fn overlay_scar(
    cine: &IntensitySlice,
    blurred_scar: &IntensitySlice,
    bp_ref: f64,
    gain: f64,
) -> Result<IntensitySlice> {
    if cine.width() != blurred_scar.width() || cine.height() != blurred_scar.height() {
        return Err(Error::Input("cine and scar weights differ in size".into()));
    }
    let data = cine
        .data()
        .iter()
        .zip(blurred_scar.data())
        .map(|(&v, &wgt)| v + gain * wgt * (bp_ref - v))
        .collect();
    cine.with_data(data)
}

/// Full cine-to-pseudo-LGE pipeline.
///
/// Stages: sample a connected pseudo-scar inside the myocardium, blur the
/// scar mask, overlay it (pulling scar intensity toward the cine blood-pool
/// median), match the histogram to `reference`, then add speckle noise. The
/// returned mask keeps the input's blood-pool labels, relabels the sampled
/// scar as fibrosis and the rest of the myocardium as viable — the fibrosis
/// class equals the sampled (pre-blur) scar bit-exactly.
pub fn cine_to_lge(
    cine: &IntensitySlice,
    myo: &SegMask,
    reference: &IntensitySlice,
    params: &SynthParams,
) -> Result<(IntensitySlice, SegMask)> {
    params.validate()?;
    if cine.width() != myo.width() || cine.height() != myo.height() {
        return Err(Error::Input(format!(
            "cine is {}x{} but the mask is {}x{}",
            cine.width(),
            cine.height(),
            myo.width(),
            myo.height()
        )));
    }
    let scar = sample_pseudo_scar(myo, params.scar_fraction, split_seed(params.rng_seed, 0))?;
    let scar_weights = cine.with_data(scar.to_f64())?;
    let blurred = gaussian_blur(&scar_weights, params.blur_sigma)?;
    let bp_ref = if params.enhancement_gain == 0.0 {
        0.0 // unused
    } else {
        let mut values: Vec<f64> =
            myo.blood_pool().iter_set().map(|(x, y)| cine.get(x, y)).collect();
        if values.is_empty() {
            return Err(Error::Input(
                "overlay needs blood-pool labels to estimate enhanced brightness".into(),
            ));
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let n = values.len();
        if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 }
    };
    let overlaid = overlay_scar(cine, &blurred, bp_ref, params.enhancement_gain)?;
    let matched = histogram_match(&overlaid, reference);
    let noisy = speckle_noise(&matched, params.speckle_sigma, split_seed(params.rng_seed, 1))?;

    let labels = myo
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (x, y) = (i % myo.width(), i / myo.width());
            if scar.get(x, y) {
                Label::Fibrosis.as_u8()
            } else if Label::from_u8(l).expect("validated").is_myocardium() {
                Label::ViableMyocardium.as_u8()
            } else {
                l
            }
        })
        .collect();
    let scar_mask = SegMask::new(myo.width(), myo.height(), labels)?;
    Ok((noisy, scar_mask))
}
