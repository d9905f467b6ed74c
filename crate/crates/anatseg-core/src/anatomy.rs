//! Per-slice anatomical validity: connected components, holes, circularity,
//! convexity defects, myocardium thickness, C-shape detection and the
//! combined validity predicate `delta`.

use serde::{Deserialize, Serialize};

use crate::stack::BinaryMask;
use crate::{Error, Result};

/// Largest structuring-element radius tried when testing whether a gap in an
/// open ring can be closed. Bounds how wide a mouth may be before a mask
/// stops counting as C-shaped.
pub const MAX_CLOSING_RADIUS: usize = 8;

/// Pixel adjacency used by [`connected_components`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Thresholds of the validity predicate. The defaults are engineering
/// choices tuned so that clean synthetic phantoms pass and visibly broken
/// masks fail; every value is overridable from the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyConfig {
    pub min_circularity: f64,
    /// Maximum tolerated convexity-defect depth, in pixels.
    pub max_defect_depth: f64,
    /// Minimum tolerated myocardium thickness, in pixels.
    pub min_thickness: f64,
    pub max_components: usize,
    pub max_holes: usize,
    /// When true, open rings detected by [`is_c_shaped`] have their shape
    /// and topology checks evaluated on the gap-closed ring.
    pub allow_c_shape: bool,
}

impl Default for AnatomyConfig {
    fn default() -> AnatomyConfig {
        AnatomyConfig {
            min_circularity: 0.4,
            max_defect_depth: 4.0,
            min_thickness: 2.0,
            max_components: 1,
            max_holes: 0,
            allow_c_shape: true,
        }
    }
}

impl AnatomyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_circularity", self.min_circularity),
            ("max_defect_depth", self.max_defect_depth),
            ("min_thickness", self.min_thickness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_components == 0 {
            return Err(Error::Parameter("max_components must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which measurement a [`CheckResult`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Components,
    Holes,
    Circularity,
    DefectDepth,
    Thickness,
}

/// One measured value against its threshold. `Components` passes when the
/// count lies in `1..=max_components`; `Holes` and `DefectDepth` pass at or
/// below their threshold; `Circularity` and `Thickness` at or above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Outcome of [`delta`]: the validity bit plus every evaluated measurement.
/// Checks that cannot be evaluated (e.g. shape measures of an empty mask)
/// are omitted rather than reported with fabricated values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyReport {
    pub passed: bool,
    /// Whether the mask was treated as an open (C-shaped) ring.
    pub c_shaped: bool,
    pub checks: Vec<CheckResult>,
}

impl AnatomyReport {
    /// The checks whose measured value violates the threshold.
    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Point the larger id at the smaller so roots stay row-major-first.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass connected-component labeling. Labels are `1..=count` assigned in
/// row-major order of each component's first pixel; background pixels get 0.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width(), mask.height());
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0]; // index 0 unused (background)
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let mut neighbors: [(isize, isize); 4] =
                [(xi - 1, yi), (xi, yi - 1), (isize::MIN, 0), (isize::MIN, 0)];
            if matches!(connectivity, Connectivity::Eight) {
                neighbors[2] = (xi - 1, yi - 1);
                neighbors[3] = (xi + 1, yi - 1);
            }
            let mut label = 0u32;
            for &(nx, ny) in &neighbors {
                if nx == isize::MIN || nx < 0 || ny < 0 || nx as usize >= w {
                    continue;
                }
                let nl = provisional[ny as usize * w + nx as usize];
                if nl != 0 {
                    if label == 0 {
                        label = nl;
                    } else {
                        union(&mut parent, label, nl);
                    }
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[y * w + x] = label;
        }
    }
    // Second pass: compress to consecutive labels in first-pixel order.
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = vec![0u32; w * h];
    for i in 0..w * h {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i]);
        if remap[root as usize] == 0 {
            count += 1;
            remap[root as usize] = count;
        }
        labels[i] = remap[root as usize];
    }
    (labels, count as usize)
}

/// Background pixels 4-reachable from the grid border.
fn border_background(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut reach = vec![false; w * h];
    let mut stack = Vec::new();
    let push = |x: usize, y: usize, reach: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
        if !mask.get(x, y) && !reach[y * w + x] {
            reach[y * w + x] = true;
            stack.push((x, y));
        }
    };
    for x in 0..w {
        push(x, 0, &mut reach, &mut stack);
        push(x, h - 1, &mut reach, &mut stack);
    }
    for y in 0..h {
        push(0, y, &mut reach, &mut stack);
        push(w - 1, y, &mut reach, &mut stack);
    }
    while let Some((x, y)) = stack.pop() {
        let (xi, yi) = (x as isize, y as isize);
        for (nx, ny) in [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)] {
            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                continue;
            }
            push(nx as usize, ny as usize, &mut reach, &mut stack);
        }
    }
    reach
}

/// Background 4-components that do not touch the border, as a labeled grid
/// plus per-component pixel counts (label order row-major).
fn enclosed_background(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let border = border_background(mask);
    let enclosed_mask = BinaryMask::from_fn(w, h, |x, y| !mask.get(x, y) && !border[y * w + x]);
    let (labels, count) = connected_components(&enclosed_mask, Connectivity::Four);
    let mut sizes = vec![0usize; count];
    for &l in &labels {
        if l != 0 {
            sizes[(l - 1) as usize] += 1;
        }
    }
    (labels, sizes)
}

/// Number of enclosed background components beyond the blood-pool cavity:
/// `enclosed - 1` when at least one enclosed component exists, else 0. The
/// cavity of a clean annulus is therefore not a hole.
pub fn count_holes(mask: &BinaryMask) -> usize {
    let (_, sizes) = enclosed_background(mask);
    sizes.len().saturating_sub(1)
}

/// The mask with every enclosed background component filled in.
pub fn filled_region(mask: &BinaryMask) -> BinaryMask {
    let (labels, _) = enclosed_background(mask);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        mask.get(x, y) || labels[y * mask.width() + x] != 0
    })
}

/// Boundary edge segments of the region: the number of (pixel, side) pairs
/// where a foreground pixel faces background or the grid edge.
fn boundary_edge_count(mask: &BinaryMask) -> usize {
    let mut edges = 0;
    for (x, y) in mask.iter_set() {
        let (xi, yi) = (x as isize, y as isize);
        for (nx, ny) in [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)] {
            if !mask.get_signed(nx, ny) {
                edges += 1;
            }
        }
    }
    edges
}

/// Circularity `4*pi*A / P^2` of the filled region, with `A` the filled
/// pixel count and `P` the contour length counted as boundary edge segments
/// (4-connectivity). Under this convention a single pixel and a 2x2 square
/// both measure `pi/4`, and a large rasterized disk levels off near
/// `pi^2/16 ~ 0.62` rather than 1, because the edge count measures the
/// bounding staircase, not the Euclidean arc length.
pub fn circularity(region: &BinaryMask) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Input("circularity of an empty region".into()));
    }
    let filled = filled_region(region);
    let area = filled.count() as f64;
    let perimeter = boundary_edge_count(&filled) as f64;
    Ok(4.0 * std::f64::consts::PI * area / (perimeter * perimeter))
}

/// Contour pixels of the region: foreground with at least one 4-neighbor
/// background or grid-edge side.
fn contour_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for (x, y) in mask.iter_set() {
        let (xi, yi) = (x as isize, y as isize);
        if [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)]
            .iter()
            .any(|&(nx, ny)| !mask.get_signed(nx, ny))
        {
            pts.push((x as f64, y as f64));
        }
    }
    pts
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew monotone-chain convex hull; collinear boundary points are dropped.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for half in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if half == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop(); // endpoint repeats as the next half's start
    }
    hull
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return (apx * apx + apy * apy).sqrt();
    }
    let t = ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0);
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// Maximum Euclidean distance from any outer-contour point of the filled
/// region to the boundary of its convex hull. Convex regions measure 0.
pub fn convexity_defect_depth(region: &BinaryMask) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Input("convexity defect of an empty region".into()));
    }
    let (_, count) = connected_components(region, Connectivity::Eight);
    if count != 1 {
        return Err(Error::Input(format!(
            "convexity defect needs a single component, found {count}"
        )));
    }
    let filled = filled_region(region);
    let contour = contour_points(&filled);
    let hull = convex_hull(&contour);
    if hull.len() <= 2 {
        return Ok(0.0); // degenerate hull: every point lies on it
    }
    let mut depth: f64 = 0.0;
    for &p in &contour {
        let mut to_hull = f64::INFINITY;
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            to_hull = to_hull.min(point_segment_distance(p, a, b));
        }
        depth = depth.max(to_hull);
    }
    Ok(depth)
}

/// Centroid used as the ray origin for thickness: the largest enclosed
/// cavity when one exists, otherwise the foreground itself.
fn thickness_origin(mask: &BinaryMask) -> (f64, f64) {
    let (labels, sizes) = enclosed_background(mask);
    let target: Option<u32> = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) // largest, lowest label on ties
        .map(|(i, _)| i as u32 + 1);
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    match target {
        Some(t) => {
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    if labels[y * mask.width() + x] == t {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1;
                    }
                }
            }
        }
        None => {
            for (x, y) in mask.iter_set() {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (sx / n as f64, sy / n as f64)
}

/// Minimum myocardium thickness: rays are cast from the cavity centroid (or
/// the region centroid when no cavity exists) at 1-degree increments; each
/// ray measures the length of the first myocardium run it crosses, sampled
/// at quarter-pixel steps, and the minimum over all intersecting rays is
/// returned.
pub fn min_thickness(myo: &BinaryMask) -> Result<f64> {
    if myo.is_empty() {
        return Err(Error::Input("thickness of an empty mask".into()));
    }
    let (cx, cy) = thickness_origin(myo);
    let max_t = ((myo.width() * myo.width() + myo.height() * myo.height()) as f64).sqrt() + 1.0;
    const STEP: f64 = 0.25;
    let mut best = f64::INFINITY;
    for deg in 0..360 {
        let theta = f64::from(deg).to_radians();
        let (dx, dy) = (theta.cos(), theta.sin());
        let mut entry: Option<f64> = None;
        let mut t = 0.0;
        while t <= max_t {
            let px = (cx + t * dx).round() as isize;
            let py = (cy + t * dy).round() as isize;
            let inside = myo.get_signed(px, py);
            match (inside, entry) {
                (true, None) => entry = Some(t),
                (false, Some(e)) => {
                    best = best.min(t - e);
                    break;
                }
                _ => {}
            }
            t += STEP;
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Input("no ray from the centroid intersects the mask".into()))
    }
}

fn dilate(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::empty(w, h);
    for (x, y) in mask.iter_set() {
        for &(dx, dy) in offsets {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out.set(nx as usize, ny as usize, true);
            }
        }
    }
    out
}

fn erode(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        offsets
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
    })
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

/// Morphological closing (dilation then erosion) with a disk structuring
/// element.
fn close_mask(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let offsets = disk_offsets(radius);
    erode(&dilate(mask, &offsets), &offsets)
}

/// Bridges the gap of an open ring: returns the first closing (radius
/// ascending through `1..=MAX_CLOSING_RADIUS`) that creates an enclosed
/// cavity, or `None` when no bounded closing does.
fn close_open_ring(mask: &BinaryMask) -> Option<BinaryMask> {
    for radius in 1..=MAX_CLOSING_RADIUS {
        let closed = close_mask(mask, radius);
        let (_, sizes) = enclosed_background(&closed);
        if !sizes.is_empty() {
            // Pad the certified radius by one where possible: the minimal
            // bridge is a knife edge whose outer dent exaggerates the
            // convexity defect of the closed ring.
            if radius < MAX_CLOSING_RADIUS {
                let padded = close_mask(mask, radius + 1);
                if !enclosed_background(&padded).1.is_empty() {
                    return Some(padded);
                }
            }
            return Some(closed);
        }
    }
    None
}

/// True iff the mask is a single open ring: exactly one component, no
/// enclosed cavity of its own (the would-be cavity leaks to the border
/// through the gap), and a bounded morphological closing of the gap creates
/// one.
pub fn is_c_shaped(myo: &BinaryMask) -> bool {
    let (_, count) = connected_components(myo, Connectivity::Eight);
    if count != 1 {
        return false;
    }
    let (_, sizes) = enclosed_background(myo);
    if !sizes.is_empty() {
        return false; // already encloses a cavity: a closed ring, not a C
    }
    close_open_ring(myo).is_some()
}

/// The anatomical validity predicate.
///
/// Measures component count, holes, circularity, convexity-defect depth and
/// minimum thickness against `cfg` and passes iff every evaluated check
/// passes. When `cfg.allow_c_shape` and the mask is an open ring, the
/// shape checks (holes, circularity, defect depth, thickness) are evaluated
/// on the gap-closed ring — an open ring fails the raw measurements by
/// construction, and rays grazing the cut faces make raw thickness
/// meaningless — while the component count stays on the original mask.
///
/// On masks with several components the shape measurements use the largest
/// 8-connected component (ties broken toward the earlier label) so the
/// report stays informative; such masks already fail the component check.
/// Checks that cannot be measured at all (empty mask) are omitted.
pub fn delta(myo: &BinaryMask, cfg: &AnatomyConfig) -> AnatomyReport {
    let (comp_labels, comp_count) = connected_components(myo, Connectivity::Eight);
    let mut checks = vec![CheckResult {
        kind: CheckKind::Components,
        value: comp_count as f64,
        threshold: cfg.max_components as f64,
        passed: comp_count >= 1 && comp_count <= cfg.max_components,
    }];
    let c_shaped = cfg.allow_c_shape && is_c_shaped(myo);

    if comp_count >= 1 {
        // Working mask for topology/shape checks: gap-closed for C-shapes.
        let working = if c_shaped {
            close_open_ring(myo).expect("is_c_shaped implies a closing exists")
        } else {
            myo.clone()
        };
        let holes = count_holes(&working);
        checks.push(CheckResult {
            kind: CheckKind::Holes,
            value: holes as f64,
            threshold: cfg.max_holes as f64,
            passed: holes <= cfg.max_holes,
        });

        let shape_target = if comp_count == 1 {
            working
        } else {
            // Largest component of the working mask.
            let mut sizes = vec![0usize; comp_count];
            for &l in &comp_labels {
                if l != 0 {
                    sizes[(l - 1) as usize] += 1;
                }
            }
            let largest = sizes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32 + 1)
                .expect("at least one component");
            BinaryMask::from_fn(myo.width(), myo.height(), |x, y| {
                comp_labels[y * myo.width() + x] == largest
            })
        };
        if let Ok(circ) = circularity(&shape_target) {
            checks.push(CheckResult {
                kind: CheckKind::Circularity,
                value: circ,
                threshold: cfg.min_circularity,
                passed: circ >= cfg.min_circularity,
            });
        }
        if let Ok(depth) = convexity_defect_depth(&shape_target) {
            checks.push(CheckResult {
                kind: CheckKind::DefectDepth,
                value: depth,
                threshold: cfg.max_defect_depth,
                passed: depth <= cfg.max_defect_depth,
            });
        }
        if let Ok(thickness) = min_thickness(&shape_target) {
            checks.push(CheckResult {
                kind: CheckKind::Thickness,
                value: thickness,
                threshold: cfg.min_thickness,
                passed: thickness >= cfg.min_thickness,
            });
        }
    }
    AnatomyReport { passed: checks.iter().all(|c| c.passed), c_shaped, checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::collections::VecDeque;

    fn annulus(size: usize, cx: f64, cy: f64, r_in: f64, r_out: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            r > r_in && r <= r_out
        })
    }

    /// Same annulus with an angular wedge removed (an open ring).
    fn c_ring(size: usize, r_in: f64, r_out: f64, gap_center: f64, gap_width: f64) -> BinaryMask {
        let c = size as f64 / 2.0;
        BinaryMask::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = (dx * dx + dy * dy).sqrt();
            if r <= r_in || r > r_out {
                return false;
            }
            let mut diff = (dy.atan2(dx) - gap_center).rem_euclid(2.0 * std::f64::consts::PI);
            if diff > std::f64::consts::PI {
                diff -= 2.0 * std::f64::consts::PI;
            }
            diff.abs() > gap_width / 2.0
        })
    }

    /// Independent BFS flood-fill component counter for oracle checks.
    fn oracle_components(mask: &BinaryMask, eight: bool) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !mask.get(sx, sy) || seen[sy * w + sx] {
                    continue;
                }
                count += 1;
                let mut queue = VecDeque::from([(sx, sy)]);
                seen[sy * w + sx] = true;
                while let Some((x, y)) = queue.pop_front() {
                    let (xi, yi) = (x as isize, y as isize);
                    let mut neighbors = vec![(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)];
                    if eight {
                        neighbors.extend([
                            (xi - 1, yi - 1),
                            (xi + 1, yi - 1),
                            (xi - 1, yi + 1),
                            (xi + 1, yi + 1),
                        ]);
                    }
                    for (nx, ny) in neighbors {
                        if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
        }
        count
    }

    /// Independent enclosed-background count: BFS the background from the
    /// border, then count 4-components of what was never reached.
    fn oracle_enclosed(mask: &BinaryMask) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask.get(x, y) {
                    if !outside[y * w + x] {
                        outside[y * w + x] = true;
                        queue.push_back((x, y));
                    }
                }
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            let (xi, yi) = (x as isize, y as isize);
            for (nx, ny) in [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)] {
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !mask.get(nx, ny) && !outside[ny * w + nx] {
                    outside[ny * w + nx] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        let enclosed = BinaryMask::from_fn(w, h, |x, y| !mask.get(x, y) && !outside[y * w + x]);
        oracle_components(&enclosed, false)
    }

    #[test]
    fn components_basics() {
        let empty = BinaryMask::empty(4, 4);
        assert_eq!(connected_components(&empty, Connectivity::Four).1, 0);
        // Two diagonal pixels: separate under 4-connectivity, joined under 8.
        let diag = BinaryMask::from_fn(3, 3, |x, y| (x, y) == (0, 0) || (x, y) == (1, 1));
        assert_eq!(connected_components(&diag, Connectivity::Four).1, 2);
        assert_eq!(connected_components(&diag, Connectivity::Eight).1, 1);
    }

    #[test]
    fn components_label_order_is_row_major() {
        // Two blobs; the one whose first pixel comes earlier row-major gets
        // label 1.
        let mask = BinaryMask::from_fn(6, 3, |x, y| (x >= 4) || (x == 0 && y == 2));
        let (labels, count) = connected_components(&mask, Connectivity::Four);
        assert_eq!(count, 2);
        assert_eq!(labels[0 * 6 + 4], 1);
        assert_eq!(labels[2 * 6 + 0], 2);
    }

    #[test]
    fn components_match_flood_fill_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for trial in 0..300 {
            let p = rng.gen_range(0.1..0.7);
            let mask = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(p));
            for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
                let (labels, count) = connected_components(&mask, conn);
                assert_eq!(count, oracle_components(&mask, eight), "trial {trial}");
                // Label values are consistent: same label iff same oracle
                // component is implied by equal counts + label/pixel match.
                for (i, &l) in labels.iter().enumerate() {
                    assert_eq!(l != 0, mask.pixels()[i]);
                }
                assert_eq!(
                    (1..=count as u32).collect::<Vec<_>>(),
                    {
                        let mut seen: Vec<u32> =
                            labels.iter().copied().filter(|&l| l != 0).collect();
                        seen.sort_unstable();
                        seen.dedup();
                        seen
                    },
                    "labels not consecutive"
                );
            }
        }
    }

    #[test]
    fn holes_hand_cases() {
        let disk = BinaryMask::from_fn(16, 16, |x, y| {
            let (dx, dy) = (x as f64 - 8.0, y as f64 - 8.0);
            (dx * dx + dy * dy).sqrt() <= 5.0
        });
        assert_eq!(count_holes(&disk), 0);
        let ring = annulus(32, 16.0, 16.0, 6.0, 10.0);
        assert_eq!(count_holes(&ring), 0, "cavity counts as blood pool, not a hole");
        // Punch one extra enclosed pixel gap into the ring band.
        let mut holed = ring.clone();
        holed.set(16, 16 - 8, false);
        assert_eq!(count_holes(&holed), 1);
    }

    #[test]
    fn holes_and_c_shape_match_oracle_exhaustively_small() {
        // Sparse random 8x8 masks: compare against the flood-fill oracle.
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..4000 {
            let p = rng.gen_range(0.05..0.6);
            let mask = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(p));
            let enclosed = oracle_enclosed(&mask);
            assert_eq!(count_holes(&mask), enclosed.saturating_sub(1));
            let expected_c = oracle_components(&mask, true) == 1
                && enclosed == 0
                && (1..=MAX_CLOSING_RADIUS)
                    .any(|r| oracle_enclosed(&close_mask(&mask, r)) >= 1);
            assert_eq!(is_c_shaped(&mask), expected_c);
        }
    }

    #[test]
    fn holes_and_c_shape_match_oracle_random_32() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        for trial in 0..10_000 {
            // Mix plain noise with structured rings so the C-shape branch is
            // exercised, not just trivially rejected.
            let mask = if trial % 4 == 0 {
                let r_out = rng.gen_range(6.0..14.0);
                let r_in = r_out - rng.gen_range(2.0..5.0);
                let mut m = c_ring(32, r_in, r_out, rng.gen_range(0.0..6.28), rng.gen_range(0.0..0.9));
                for _ in 0..rng.gen_range(0..4) {
                    m.set(rng.gen_range(0..32), rng.gen_range(0..32), rng.gen_bool(0.5));
                }
                m
            } else {
                let p = rng.gen_range(0.02..0.5);
                BinaryMask::from_fn(32, 32, |_, _| rng.gen_bool(p))
            };
            let enclosed = oracle_enclosed(&mask);
            assert_eq!(count_holes(&mask), enclosed.saturating_sub(1), "trial {trial}");
            let expected_c = oracle_components(&mask, true) == 1
                && enclosed == 0
                && (1..=MAX_CLOSING_RADIUS)
                    .any(|r| oracle_enclosed(&close_mask(&mask, r)) >= 1);
            assert_eq!(is_c_shaped(&mask), expected_c, "trial {trial}");
        }
    }

    #[test]
    fn circularity_hand_cases() {
        let single = BinaryMask::from_fn(3, 3, |x, y| (x, y) == (1, 1));
        assert!((circularity(&single).unwrap() - std::f64::consts::PI / 4.0).abs() < 1e-12);
        let square2 = BinaryMask::from_fn(4, 4, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
        assert!((circularity(&square2).unwrap() - std::f64::consts::PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn circularity_of_rasterized_disk() {
        // Under the edge-segment perimeter convention an HV-convex region
        // has P = 2*(rows + cols), so a disk of radius 20 measures
        // 4*pi*A/P^2 ~ 0.59 and tends to pi^2/16 ~ 0.617 in the limit —
        // well above the 0.4 default threshold, well below the analytic 1.
        let disk = BinaryMask::from_fn(48, 48, |x, y| {
            let (dx, dy) = (x as f64 - 24.0, y as f64 - 24.0);
            (dx * dx + dy * dy).sqrt() <= 20.0
        });
        let c = circularity(&disk).unwrap();
        assert!((0.55..=0.70).contains(&c), "disk circularity {c}");
    }

    #[test]
    fn circularity_fills_the_cavity() {
        // A ring and its filled disk measure identically.
        let ring = annulus(32, 16.0, 16.0, 6.0, 10.0);
        let disk = BinaryMask::from_fn(32, 32, |x, y| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            let r = (dx * dx + dy * dy).sqrt();
            r <= 10.0 && r > 0.0 || (x == 16 && y == 16)
        });
        let ring_c = circularity(&ring).unwrap();
        let disk_c = circularity(&disk).unwrap();
        assert!((ring_c - disk_c).abs() < 1e-12);
    }

    #[test]
    fn defect_depth_convex_rectangle_is_zero() {
        let rect = BinaryMask::from_fn(12, 8, |x, y| (2..10).contains(&x) && (1..7).contains(&y));
        assert_eq!(convexity_defect_depth(&rect).unwrap(), 0.0);
    }

    #[test]
    fn defect_depth_notched_square() {
        // 10x10 square with a 1-wide, 3-deep notch cut from the top edge
        // midpoint: the deepest exposed pixel sits 3 px under the hull edge.
        let mask = BinaryMask::from_fn(12, 12, |x, y| {
            let inside = (1..11).contains(&x) && (1..11).contains(&y);
            let notch = x == 6 && (1..4).contains(&y);
            inside && !notch
        });
        let d = convexity_defect_depth(&mask).unwrap();
        assert!((d - 3.0).abs() <= 0.5, "notch depth {d}");
    }

    #[test]
    fn defect_depth_rotation_invariant_exactly() {
        let mask = BinaryMask::from_fn(16, 16, |x, y| {
            let inside = (2..14).contains(&x) && (3..13).contains(&y);
            let bite = (6..10).contains(&x) && (3..7).contains(&y);
            inside && !bite
        });
        let d0 = convexity_defect_depth(&mask).unwrap();
        let mut rotated = mask.clone();
        for _ in 0..3 {
            let (w, h) = (rotated.width(), rotated.height());
            let prev = rotated.clone();
            rotated = BinaryMask::from_fn(h, w, |x, y| prev.get(w - 1 - y, x));
            let d = convexity_defect_depth(&rotated).unwrap();
            assert_eq!(d0.to_bits(), d.to_bits(), "defect depth changed under rotation");
        }
        assert!(d0 > 3.0);
    }

    #[test]
    fn defect_depth_rejects_multiple_components() {
        let mask = BinaryMask::from_fn(8, 8, |x, _| x == 1 || x == 6);
        assert!(convexity_defect_depth(&mask).is_err());
    }

    #[test]
    fn thickness_annulus() {
        let ring = annulus(33, 16.0, 16.0, 6.0, 10.0);
        let t = min_thickness(&ring).unwrap();
        assert!((t - 4.0).abs() <= 1.0, "annulus thickness {t}");
    }

    #[test]
    fn thickness_detects_thin_section() {
        // Annulus with one arc thinned to a single-pixel shell.
        let ring = BinaryMask::from_fn(33, 33, |x, y| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            let r = (dx * dx + dy * dy).sqrt();
            let angle = dy.atan2(dx);
            if angle.abs() < 0.35 {
                (7.5..=8.5).contains(&r)
            } else {
                r > 6.0 && r <= 10.0
            }
        });
        let t = min_thickness(&ring).unwrap();
        assert!((0.4..=1.6).contains(&t), "thin section measured {t}");
    }

    #[test]
    fn thickness_scales_with_the_mask() {
        let small = annulus(33, 16.0, 16.0, 6.0, 10.0);
        let large = annulus(65, 32.0, 32.0, 12.0, 20.0);
        let ts = min_thickness(&small).unwrap();
        let tl = min_thickness(&large).unwrap();
        assert!((tl - 2.0 * ts).abs() <= 1.0, "{ts} vs {tl}");
    }

    #[test]
    fn thickness_rejects_empty() {
        assert!(min_thickness(&BinaryMask::empty(8, 8)).is_err());
    }

    #[test]
    fn c_shape_hand_cases() {
        assert!(!is_c_shaped(&annulus(32, 16.0, 16.0, 6.0, 10.0)));
        assert!(!is_c_shaped(&BinaryMask::empty(16, 16)));
        // Ring with a small angular gap is a C.
        let open = c_ring(32, 6.0, 10.0, 0.0, 0.45);
        assert!(is_c_shaped(&open));
        // A solid blob never becomes one.
        let blob = BinaryMask::from_fn(16, 16, |x, y| {
            let (dx, dy) = (x as f64 - 8.0, y as f64 - 8.0);
            dx * dx + dy * dy <= 20.0
        });
        assert!(!is_c_shaped(&blob));
    }

    #[test]
    fn delta_clean_annulus_passes_defaults() {
        let ring = annulus(64, 32.0, 32.0, 8.0, 13.0);
        let report = delta(&ring, &AnatomyConfig::default());
        assert!(report.passed, "failed checks: {:?}", report.failed().collect::<Vec<_>>());
        assert!(!report.c_shaped);
        assert_eq!(report.checks.len(), 5);
        assert_eq!(report.passed, report.failed().count() == 0);
    }

    #[test]
    fn delta_two_rings_fail_component_check() {
        let two = BinaryMask::from_fn(64, 32, |x, y| {
            let left = {
                let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
                let r = (dx * dx + dy * dy).sqrt();
                r > 5.0 && r <= 8.0
            };
            let right = {
                let (dx, dy) = (x as f64 - 48.0, y as f64 - 16.0);
                let r = (dx * dx + dy * dy).sqrt();
                r > 5.0 && r <= 8.0
            };
            left || right
        });
        let report = delta(&two, &AnatomyConfig::default());
        assert!(!report.passed);
        let failed: Vec<_> = report.failed().map(|c| c.kind).collect();
        assert!(failed.contains(&CheckKind::Components));
        let comp = report.checks.iter().find(|c| c.kind == CheckKind::Components).unwrap();
        assert_eq!(comp.value, 2.0);
        assert_eq!(comp.threshold, 1.0);
    }

    #[test]
    fn delta_empty_mask_fails() {
        let report = delta(&BinaryMask::empty(32, 32), &AnatomyConfig::default());
        assert!(!report.passed);
        let comp = report.checks.iter().find(|c| c.kind == CheckKind::Components).unwrap();
        assert!(!comp.passed);
        assert_eq!(comp.value, 0.0);
    }

    #[test]
    fn delta_c_shape_rescued_only_when_allowed() {
        let open = c_ring(64, 8.0, 13.0, 1.0, 0.4);
        let mut cfg = AnatomyConfig::default();
        cfg.allow_c_shape = true;
        let report = delta(&open, &cfg);
        assert!(report.c_shaped);
        assert!(report.passed, "failed: {:?}", report.failed().collect::<Vec<_>>());
        cfg.allow_c_shape = false;
        let report = delta(&open, &cfg);
        assert!(!report.passed, "open ring must fail raw shape checks");
    }

    #[test]
    fn delta_holed_ring_fails() {
        let mut ring = annulus(64, 32.0, 32.0, 8.0, 13.0);
        // Carve a 2x2 enclosed hole inside the band.
        for (x, y) in [(32, 21), (33, 21), (32, 22), (33, 22)] {
            ring.set(x, y, false);
        }
        let report = delta(&ring, &AnatomyConfig::default());
        assert!(!report.passed);
        assert!(report.failed().any(|c| c.kind == CheckKind::Holes));
    }

    #[test]
    fn delta_invariant_under_rotation_and_translation() {
        let ring = annulus(48, 20.0, 22.0, 6.0, 10.0);
        let base = delta(&ring, &AnatomyConfig::default());
        // Translation by (5, -3).
        let translated = BinaryMask::from_fn(48, 48, |x, y| {
            let (sx, sy) = (x as isize - 5, y as isize + 3);
            sx >= 0 && sy >= 0 && (sx as usize) < 48 && (sy as usize) < 48
                && ring.get(sx as usize, sy as usize)
        });
        // Quarter rotation.
        let rotated = BinaryMask::from_fn(48, 48, |x, y| ring.get(48 - 1 - y, x));
        for (name, other) in [("translated", delta(&translated, &AnatomyConfig::default())),
                              ("rotated", delta(&rotated, &AnatomyConfig::default()))] {
            assert_eq!(base.passed, other.passed, "{name} flipped the verdict");
            for (a, b) in base.checks.iter().zip(&other.checks) {
                assert_eq!(a.kind, b.kind);
                let tol = if a.kind == CheckKind::Thickness { 0.25 + 1e-9 } else { 1e-12 };
                assert!(
                    (a.value - b.value).abs() <= tol,
                    "{name}: {:?} moved from {} to {}",
                    a.kind,
                    a.value,
                    b.value
                );
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AnatomyConfig::default().validate().is_ok());
        let bad = AnatomyConfig { min_thickness: 0.0, ..AnatomyConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AnatomyConfig { max_components: 0, ..AnatomyConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_serializes_to_json() {
        let report = delta(&annulus(32, 16.0, 16.0, 5.0, 9.0), &AnatomyConfig::default());
        let json = serde_json::to_string(&report).unwrap();
        let back: AnatomyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"components\""));
    }
}
