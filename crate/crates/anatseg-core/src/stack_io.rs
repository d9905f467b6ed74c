//! On-disk stack directory format.
//!
//! A stack directory contains a `manifest.json` plus one intensity file and
//! optionally one mask file per slice:
//!
//! * `slice_NNN.raw` — row-major `u16` little-endian intensities;
//! * `mask_NNN.pgm` — binary PGM (`P5`, maxval 255) whose bytes are the
//!   segmentation labels `0..=3`.
//!
//! The manifest records grid dimensions, pixel spacing, slice gap,
//! orientation and study metadata, and lists the per-slice file names in
//! apex-to-base order. Serialization is deterministic: saving the same stack
//! twice produces byte-identical files, and reals survive a save/load cycle
//! exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stack::{IntensitySlice, SegMask, StackSlice, StudyMetadata, VolumeStack};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct SliceEntry {
    intensity: String,
    mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    width: usize,
    height: usize,
    px_spacing_x: f64,
    px_spacing_y: f64,
    slice_gap: f64,
    orientation_turns: u8,
    rescale_slope: f64,
    rescale_intercept: f64,
    window_center: Option<f64>,
    window_width: Option<f64>,
    patient_id: String,
    slices: Vec<SliceEntry>,
}

/// Writes `stack` and `meta` into `dir`, creating the directory if needed.
///
/// Intensities are rounded to the nearest integer; a value that rounds
/// outside the `u16` range is a consistency error rather than being silently
/// clamped.
pub fn save_stack(dir: &Path, stack: &VolumeStack, meta: &StudyMetadata) -> Result<()> {
    validate_window(meta.window_center, meta.window_width)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(stack.len());
    for (i, slice) in stack.slices().iter().enumerate() {
        let raw_name = format!("slice_{i:03}.raw");
        write_raw_u16(&dir.join(&raw_name), slice.intensity.data())?;
        let mask_name = match &slice.mask {
            Some(mask) => {
                let name = format!("mask_{i:03}.pgm");
                write_pgm(&dir.join(&name), mask.width(), mask.height(), mask.labels())?;
                Some(name)
            }
            None => None,
        };
        entries.push(SliceEntry { intensity: raw_name, mask: mask_name });
    }
    let manifest = Manifest {
        width: stack.width(),
        height: stack.height(),
        px_spacing_x: stack.px_spacing_x(),
        px_spacing_y: stack.px_spacing_y(),
        slice_gap: stack.slice_gap(),
        orientation_turns: stack.orientation_turns(),
        rescale_slope: meta.rescale_slope,
        rescale_intercept: meta.rescale_intercept,
        window_center: meta.window_center,
        window_width: meta.window_width,
        patient_id: meta.patient_id.clone(),
        slices: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

/// Loads a stack directory written by [`save_stack`] (or assembled by hand).
pub fn load_stack(dir: &Path) -> Result<(VolumeStack, StudyMetadata)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
    validate_window(manifest.window_center, manifest.window_width)?;
    if manifest.slices.is_empty() {
        return Err(Error::Format("manifest lists no slices".into()));
    }
    let (w, h) = (manifest.width, manifest.height);
    let mut slices = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let raw = read_raw_u16(&dir.join(&entry.intensity), w * h)?;
        let data = raw.into_iter().map(f64::from).collect();
        let intensity =
            IntensitySlice::new(w, h, data, manifest.px_spacing_x, manifest.px_spacing_y)?;
        let mask = match &entry.mask {
            Some(name) => {
                let (mw, mh, bytes) = read_pgm(&dir.join(name))?;
                if mw != w || mh != h {
                    return Err(Error::Format(format!(
                        "mask {name} is {mw}x{mh} but the manifest says {w}x{h}"
                    )));
                }
                Some(SegMask::new(mw, mh, bytes)?)
            }
            None => None,
        };
        slices.push(StackSlice { intensity, mask });
    }
    let stack = VolumeStack::new(slices, manifest.slice_gap, manifest.orientation_turns)?;
    let meta = StudyMetadata {
        rescale_slope: manifest.rescale_slope,
        rescale_intercept: manifest.rescale_intercept,
        window_center: manifest.window_center,
        window_width: manifest.window_width,
        patient_id: manifest.patient_id,
    };
    Ok((stack, meta))
}

fn validate_window(center: Option<f64>, width: Option<f64>) -> Result<()> {
    match (center, width) {
        (Some(_), None) | (None, Some(_)) => Err(Error::Format(
            "window_center and window_width must both be present or both absent".into(),
        )),
        (Some(_), Some(w)) if !(w.is_finite() && w > 0.0) => {
            Err(Error::Format(format!("window_width must be positive and finite, got {w}")))
        }
        _ => Ok(()),
    }
}

fn write_raw_u16(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for &v in data {
        let r = v.round();
        if !(0.0..=65535.0).contains(&r) {
            return Err(Error::Consistency(format!(
                "intensity {v} does not fit the u16 storage range"
            )));
        }
        bytes.extend_from_slice(&(r as u16).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_raw_u16(path: &Path, expected: usize) -> Result<Vec<u16>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != expected * 2 {
        return Err(Error::Format(format!(
            "{} holds {} bytes but {expected} u16 values require {}",
            path.display(),
            bytes.len(),
            expected * 2
        )));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

/// Writes a binary PGM (`P5`, maxval 255). Exposed for tooling that wants to
/// inspect masks with ordinary image viewers.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::Consistency(format!(
            "PGM payload holds {} bytes but {width}x{height} requires {}",
            bytes.len(),
            width * height
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM with maxval 255, tolerating `#` comments in the
/// header.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let parse = || -> Option<(usize, usize, usize)> {
        // Header: "P5", width, height, maxval, then exactly one whitespace
        // byte before the payload.
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
            // Skip whitespace and comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            (start < pos).then_some((start, pos))
        };
        let (s, e) = token(&bytes)?;
        if &bytes[s..e] != b"P5" {
            return None;
        }
        let mut nums = [0usize; 3];
        for slot in &mut nums {
            let (s, e) = token(&bytes)?;
            *slot = std::str::from_utf8(&bytes[s..e]).ok()?.parse().ok()?;
        }
        // Single whitespace separator before the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return None;
        }
        pos += 1;
        (bytes.len() - pos == nums[0] * nums[1] && nums[2] == 255)
            .then_some((nums[0], nums[1], pos))
    };
    let (width, height, payload_start) = parse()
        .ok_or_else(|| Error::Format(format!("{} is not a P5/255 PGM", path.display())))?;
    Ok((width, height, bytes[payload_start..].to_vec()))
}
