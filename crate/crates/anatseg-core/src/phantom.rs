//! Synthetic annulus phantoms: randomized myocardium rings with intensity
//! rendering, optional C-shaped gap and planted scar variants, plus mask
//! perturbations for repair experiments. The generator stands in for
//! clinical data in desk-scale verification runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::stack::{BinaryMask, IntensitySlice, SegMask, StackSlice, VolumeStack};
use crate::{Error, Result};

/// Rendered intensity of each tissue class, before speckle.
const BG_INTENSITY: f64 = 0.05;
const BLOOD_INTENSITY: f64 = 0.9;
const MYO_INTENSITY: f64 = 0.2;
const SCAR_INTENSITY: f64 = 1.0;
const GRAY_ZONE_INTENSITY: f64 = 0.35;

/// Knobs of [`generate_phantoms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Square slice side in pixels.
    pub size: usize,
    /// Fraction of slices rendered with an open (C-shaped) ring.
    pub c_fraction: f64,
    /// Fraction of slices carrying a planted fibrosis arc.
    pub scar_fraction: f64,
    /// Standard deviation of additive intensity speckle; 0 renders
    /// noiseless tissue classes.
    pub noise_sigma: f64,
    pub px_spacing: f64,
    pub slice_gap: f64,
}

impl Default for PhantomParams {
    fn default() -> PhantomParams {
        PhantomParams {
            size: 64,
            c_fraction: 0.0,
            scar_fraction: 0.25,
            noise_sigma: 0.0,
            px_spacing: 1.0,
            slice_gap: 8.0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Parameter(format!("phantom size must be at least 32, got {}", self.size)));
        }
        for (name, f) in [("c_fraction", self.c_fraction), ("scar_fraction", self.scar_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Parameter(format!("{name} must lie in [0,1], got {f}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma)));
        }
        if !(self.px_spacing > 0.0 && self.slice_gap > 0.0) {
            return Err(Error::Parameter("spacing and gap must be positive".into()));
        }
        Ok(())
    }
}

/// What was planted into one generated slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomMeta {
    /// The ring was cut open into a C shape.
    pub c_variant: bool,
    /// Pixels rendered at full scar intensity (0 when no fibrosis arc).
    pub scar_pixels: usize,
    /// Fibrosis pixels rendered at gray-zone intensity.
    pub gz_pixels: usize,
}

/// A generated stack together with per-slice ground truth.
#[derive(Clone, Debug)]
pub struct PhantomSet {
    pub stack: VolumeStack,
    pub meta: Vec<PhantomMeta>,
}

/// Smallest signed angular distance from `angle` to `center`.
fn angle_diff(angle: f64, center: f64) -> f64 {
    let mut d = (angle - center).rem_euclid(2.0 * std::f64::consts::PI);
    if d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    d
}

/// Generates `n` randomized short-axis annulus slices: jittered center and
/// radii, mild elliptical eccentricity, a monotone apex-to-base radius
/// ramp, and per-slice C-gap / fibrosis-arc variants drawn with the
/// configured fractions. Blood and scar render bright, myocardium dark.
/// Closed-ring masks are anatomically valid by construction.
pub fn generate_phantoms(n: usize, params: &PhantomParams, seed: u64) -> Result<PhantomSet> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Parameter("phantom count must be at least 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = params.size;
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let mut slices = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        // Apex-to-base ramp keeps per-stack areas loosely increasing.
        let ramp = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let r_out = (0.27 + 0.10 * ramp + rng.gen_range(-0.015..0.015)) * size as f64;
        let thickness = rng.gen_range(4.5..7.0);
        let r_in = r_out - thickness;
        let cx = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let cy = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let (ex, ey) = (rng.gen_range(0.88..1.12), rng.gen_range(0.88..1.12));
        let c_variant = rng.gen_bool(params.c_fraction);
        // Cap the gap arc so a disk closing of radius at most 8 px can
        // bridge it; in a thin band the bridgeable gap is well under 2r.
        let gap_center = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let gap_width = rng.gen_range(0.35_f64..0.55).min(7.0 / r_out);
        let with_scar = !c_variant && rng.gen_bool(params.scar_fraction);
        let scar_center = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let scar_width = rng.gen_range(0.5..1.1);

        let mut labels = vec![0u8; size * size];
        let mut intensity = vec![BG_INTENSITY; size * size];
        let mut scar_pixels = 0;
        let mut gz_pixels = 0;
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 - cx) / ex;
                let v = (y as f64 - cy) / ey;
                let rho = (u * u + v * v).sqrt();
                let idx = y * size + x;
                if rho <= r_in {
                    labels[idx] = 1;
                    intensity[idx] = BLOOD_INTENSITY;
                } else if rho <= r_out {
                    let phi = v.atan2(u);
                    if c_variant && angle_diff(phi, gap_center).abs() <= gap_width / 2.0 {
                        continue; // the cut leaves background
                    }
                    let scar_offset = angle_diff(phi, scar_center);
                    if with_scar && scar_offset.abs() <= scar_width / 2.0 {
                        labels[idx] = 3;
                        // The leading half of the arc is dense scar, the
                        // trailing half gray zone.
                        if scar_offset >= 0.0 {
                            intensity[idx] = SCAR_INTENSITY;
                            scar_pixels += 1;
                        } else {
                            intensity[idx] = GRAY_ZONE_INTENSITY;
                            gz_pixels += 1;
                        }
                    } else {
                        labels[idx] = 2;
                        intensity[idx] = MYO_INTENSITY;
                    }
                }
            }
        }
        if let Some(dist) = &noise {
            for v in &mut intensity {
                *v += dist.sample(&mut rng);
            }
        }
        slices.push(StackSlice {
            intensity: IntensitySlice::new(size, size, intensity, params.px_spacing, params.px_spacing)?,
            mask: Some(SegMask::new(size, size, labels)?),
        });
        meta.push(PhantomMeta { c_variant, scar_pixels, gz_pixels });
    }
    let stack = VolumeStack::new(slices, params.slice_gap, 0)?;
    Ok(PhantomSet { stack, meta })
}

/// Foreground pixels of `mask` with a background 8-neighbour.
fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    mask.iter_set()
        .filter(|&(x, y)| {
            (-1isize..=1).any(|dy| {
                (-1isize..=1).any(|dx| {
                    (dx, dy) != (0, 0) && !mask.get_signed(x as isize + dx, y as isize + dy)
                })
            })
        })
        .collect()
}

fn centroid(mask: &BinaryMask) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    (sx / n as f64, sy / n as f64)
}

/// Degrades a mask with a seeded random perturbation: ragged boundary
/// erosion, punched holes, a cut wedge, or holes plus light erosion.
/// Returns the input unchanged only if the damage would empty the mask.
pub fn perturb_mask(mask: &BinaryMask, seed: u64) -> BinaryMask {
    if mask.is_empty() {
        return mask.clone();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = mask.clone();
    let mode = rng.gen_range(0..4);
    if mode == 0 || mode == 3 {
        // Drop boundary pixels at random for a ragged, low-circularity rim.
        let p = if mode == 0 { 0.5 } else { 0.25 };
        for (x, y) in boundary(mask) {
            if rng.gen_bool(p) {
                out.set(x, y, false);
            }
        }
    }
    if mode == 1 || mode == 3 {
        let fg: Vec<(usize, usize)> = mask.iter_set().collect();
        for _ in 0..rng.gen_range(2..=4) {
            let &(cx, cy) = &fg[rng.gen_range(0..fg.len())];
            let r = rng.gen_range(1..=2) as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy <= r * r {
                        let (px, py) = (cx as isize + dx, cy as isize + dy);
                        if px >= 0 && py >= 0 && (px as usize) < out.width() && (py as usize) < out.height() {
                            out.set(px as usize, py as usize, false);
                        }
                    }
                }
            }
        }
    }
    if mode == 2 {
        let (cx, cy) = centroid(mask);
        let cut_center = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        for (x, y) in mask.iter_set() {
            let phi = (y as f64 - cy).atan2(x as f64 - cx);
            if angle_diff(phi, cut_center).abs() <= 0.175 {
                out.set(x, y, false);
            }
        }
    }
    if out.is_empty() {
        mask.clone()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{delta, is_c_shaped, AnatomyConfig};
    use crate::clinical::fwhm_scar;

    fn myo_masks(set: &PhantomSet) -> Vec<BinaryMask> {
        set.stack
            .slices()
            .iter()
            .map(|s| s.mask.as_ref().unwrap().myocardium())
            .collect()
    }

    #[test]
    fn same_seed_reproduces_the_stack_exactly() {
        let params = PhantomParams { noise_sigma: 0.05, c_fraction: 0.3, ..PhantomParams::default() };
        let a = generate_phantoms(12, &params, 99).unwrap();
        let b = generate_phantoms(12, &params, 99).unwrap();
        assert_eq!(a.meta, b.meta);
        for (sa, sb) in a.stack.slices().iter().zip(b.stack.slices()) {
            assert_eq!(sa.mask, sb.mask);
            assert_eq!(sa.intensity.data(), sb.intensity.data());
        }
        let c = generate_phantoms(12, &params, 100).unwrap();
        assert_ne!(
            a.stack.slices()[0].mask, c.stack.slices()[0].mask,
            "different seeds should differ"
        );
    }

    #[test]
    fn zero_c_fraction_generates_no_c_shapes() {
        let set = generate_phantoms(40, &PhantomParams::default(), 7).unwrap();
        for (mask, meta) in myo_masks(&set).iter().zip(&set.meta) {
            assert!(!meta.c_variant);
            assert!(!is_c_shaped(mask));
        }
    }

    #[test]
    fn c_variants_are_c_shaped_and_flagged() {
        let params = PhantomParams { c_fraction: 1.0, ..PhantomParams::default() };
        let set = generate_phantoms(20, &params, 11).unwrap();
        for (mask, meta) in myo_masks(&set).iter().zip(&set.meta) {
            assert!(meta.c_variant);
            assert!(is_c_shaped(mask), "every generated C variant must read back as C-shaped");
        }
    }

    #[test]
    fn generated_masks_pass_the_default_anatomy_check() {
        let set = generate_phantoms(100, &PhantomParams::default(), 3).unwrap();
        let cfg = AnatomyConfig::default();
        let passed = myo_masks(&set).iter().filter(|m| delta(m, &cfg).passed).count();
        assert!(passed >= 95, "only {passed}/100 phantoms passed the default check");
    }

    #[test]
    fn foreground_keeps_off_the_image_border() {
        let set = generate_phantoms(30, &PhantomParams { c_fraction: 0.5, ..Default::default() }, 5).unwrap();
        for mask in myo_masks(&set) {
            for (x, y) in mask.iter_set() {
                assert!(x > 0 && y > 0 && x < mask.width() - 1 && y < mask.height() - 1);
            }
        }
    }

    #[test]
    fn planted_scar_counts_are_recovered_exactly_without_noise() {
        let params = PhantomParams { scar_fraction: 1.0, ..PhantomParams::default() };
        let set = generate_phantoms(25, &params, 13).unwrap();
        let mut saw_scar = false;
        for (slice, meta) in set.stack.slices().iter().zip(&set.meta) {
            let fib = slice.mask.as_ref().unwrap().fibrosis();
            assert_eq!(fib.count(), meta.scar_pixels + meta.gz_pixels);
            let q = fwhm_scar(&slice.intensity, &fib).unwrap();
            assert_eq!(q.scar_pixel_count, meta.scar_pixels, "noiseless FWHM must be exact");
            assert_eq!(q.gz_pixel_count, meta.gz_pixels);
            saw_scar |= meta.scar_pixels > 0;
        }
        assert!(saw_scar);
    }

    #[test]
    fn areas_ramp_upward_from_apex_to_base() {
        let set = generate_phantoms(10, &PhantomParams::default(), 21).unwrap();
        let areas: Vec<usize> = set
            .stack
            .slices()
            .iter()
            .map(|s| s.mask.as_ref().unwrap().left_ventricle().count())
            .collect();
        assert!(areas[9] > areas[0], "base slice should outgrow the apex slice: {areas:?}");
    }

    #[test]
    fn perturbation_is_seeded_and_damages_the_mask() {
        let set = generate_phantoms(8, &PhantomParams::default(), 31).unwrap();
        for (i, mask) in myo_masks(&set).iter().enumerate() {
            let a = perturb_mask(mask, 1000 + i as u64);
            let b = perturb_mask(mask, 1000 + i as u64);
            assert_eq!(a.pixels(), b.pixels(), "same seed, same damage");
            assert!(!a.is_empty());
            assert_ne!(a.pixels(), mask.pixels(), "seed {i} left the mask untouched");
            // Damage only removes pixels.
            for (p, q) in a.pixels().iter().zip(mask.pixels()) {
                assert!(!p | q, "perturbation must not add foreground");
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(generate_phantoms(0, &PhantomParams::default(), 0).is_err());
        assert!(generate_phantoms(1, &PhantomParams { size: 8, ..Default::default() }, 0).is_err());
        assert!(generate_phantoms(1, &PhantomParams { c_fraction: 1.5, ..Default::default() }, 0).is_err());
        assert!(generate_phantoms(1, &PhantomParams { noise_sigma: -0.1, ..Default::default() }, 0).is_err());
    }
}
