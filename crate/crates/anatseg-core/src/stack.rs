//! Core data model: intensity slices, segmentation masks, binary masks and
//! short-axis volume stacks.
//!
//! All grids are row-major with `(x, y)` addressing, `x` running along a row
//! and `y` selecting the row, so the flat index of a pixel is
//! `y * width + x`. Slices of a stack are ordered apex to base.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Segmentation label of a single pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    BloodPool = 1,
    ViableMyocardium = 2,
    Fibrosis = 3,
}

impl Label {
    /// Decodes a raw byte, rejecting values outside `0..=3`.
    pub fn from_u8(value: u8) -> Result<Label> {
        match value {
            0 => Ok(Label::Background),
            1 => Ok(Label::BloodPool),
            2 => Ok(Label::ViableMyocardium),
            3 => Ok(Label::Fibrosis),
            other => Err(Error::Label(other)),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// True for viable myocardium and fibrosis (the myocardial ring).
    pub fn is_myocardium(self) -> bool {
        matches!(self, Label::ViableMyocardium | Label::Fibrosis)
    }

    /// True for every label belonging to the left ventricle (blood pool,
    /// viable myocardium, fibrosis).
    pub fn is_left_ventricle(self) -> bool {
        !matches!(self, Label::Background)
    }
}

/// A single 2-D intensity image with physical pixel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensitySlice {
    width: usize,
    height: usize,
    data: Vec<f64>,
    px_spacing_x: f64,
    px_spacing_y: f64,
}

impl IntensitySlice {
    /// Builds a slice, checking that the buffer matches the dimensions, all
    /// intensities are finite and both spacings are positive and finite.
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        px_spacing_x: f64,
        px_spacing_y: f64,
    ) -> Result<IntensitySlice> {
        if width == 0 || height == 0 {
            return Err(Error::Consistency(format!(
                "slice dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Consistency(format!(
                "intensity buffer holds {} values but {width}x{height} requires {}",
                data.len(),
                width * height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("non-finite intensity value".into()));
        }
        for (name, s) in [("x", px_spacing_x), ("y", px_spacing_y)] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Consistency(format!(
                    "pixel spacing {name} must be positive and finite, got {s}"
                )));
            }
        }
        Ok(IntensitySlice { width, height, data, px_spacing_x, px_spacing_y })
    }

    /// Convenience constructor for a zero-filled slice with unit spacing.
    pub fn zeros(width: usize, height: usize) -> IntensitySlice {
        IntensitySlice::new(width, height, vec![0.0; width * height], 1.0, 1.0)
            .expect("zero slice is always valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn px_spacing_x(&self) -> f64 {
        self.px_spacing_x
    }

    pub fn px_spacing_y(&self) -> f64 {
        self.px_spacing_y
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    /// Applies `f` to every intensity, keeping dimensions and spacing.
    /// Returns an error if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<IntensitySlice> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        IntensitySlice::new(self.width, self.height, data, self.px_spacing_x, self.px_spacing_y)
    }

    /// Rebuilds the slice around a new buffer with the same dimensions.
    pub fn with_data(&self, data: Vec<f64>) -> Result<IntensitySlice> {
        IntensitySlice::new(self.width, self.height, data, self.px_spacing_x, self.px_spacing_y)
    }
}

/// A per-pixel label map aligned with an [`IntensitySlice`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegMask {
    /// Builds a mask, rejecting any label byte outside `0..=3`.
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<SegMask> {
        if width == 0 || height == 0 {
            return Err(Error::Consistency(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::Consistency(format!(
                "label buffer holds {} values but {width}x{height} requires {}",
                labels.len(),
                width * height
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::Label(bad));
        }
        Ok(SegMask { width, height, labels })
    }

    pub fn background(width: usize, height: usize) -> SegMask {
        SegMask::new(width, height, vec![0; width * height]).expect("background mask is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_at(&self, x: usize, y: usize) -> Label {
        debug_assert!(x < self.width && y < self.height);
        Label::from_u8(self.labels[y * self.width + x]).expect("labels validated on construction")
    }

    /// Number of pixels carrying each of the four labels, indexed by label
    /// value.
    pub fn histogram(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Extracts the pixels whose label satisfies `pred` as a binary mask.
    pub fn binary_where(&self, pred: impl Fn(Label) -> bool) -> BinaryMask {
        let pixels = self
            .labels
            .iter()
            .map(|&l| pred(Label::from_u8(l).expect("validated")))
            .collect();
        BinaryMask { width: self.width, height: self.height, pixels }
    }

    /// Myocardium = viable myocardium plus fibrosis.
    pub fn myocardium(&self) -> BinaryMask {
        self.binary_where(Label::is_myocardium)
    }

    /// Left ventricle = blood pool plus myocardium.
    pub fn left_ventricle(&self) -> BinaryMask {
        self.binary_where(Label::is_left_ventricle)
    }

    pub fn fibrosis(&self) -> BinaryMask {
        self.binary_where(|l| l == Label::Fibrosis)
    }

    pub fn blood_pool(&self) -> BinaryMask {
        self.binary_where(|l| l == Label::BloodPool)
    }
}

/// A plain binary pixel grid used by morphology, the autoencoder and the
/// repair machinery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<BinaryMask> {
        if width == 0 || height == 0 {
            return Err(Error::Consistency(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Consistency(format!(
                "pixel buffer holds {} values but {width}x{height} requires {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(BinaryMask { width, height, pixels })
    }

    pub fn empty(width: usize, height: usize) -> BinaryMask {
        BinaryMask { width, height, pixels: vec![false; width * height] }
    }

    /// Builds a mask by evaluating `f(x, y)` on every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> BinaryMask {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        BinaryMask { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y * self.width + x]
    }

    /// Bounds-checked lookup treating everything outside the grid as
    /// background; handy for neighbourhood scans.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            false
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y * self.width + x] = value;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| !p)
    }

    /// Iterates over foreground pixel coordinates in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(move |(i, _)| (i % width, i / width))
    }

    /// Foreground as 1.0, background as 0.0 — the autoencoder input encoding.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-study acquisition metadata carried alongside a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// DICOM-style display window; both present or both absent.
    pub window_center: Option<f64>,
    pub window_width: Option<f64>,
    pub patient_id: String,
}

impl Default for StudyMetadata {
    fn default() -> StudyMetadata {
        StudyMetadata {
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            window_center: None,
            window_width: None,
            patient_id: String::new(),
        }
    }
}

/// One stack entry: an intensity image and, when segmented, its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StackSlice {
    pub intensity: IntensitySlice,
    pub mask: Option<SegMask>,
}

/// An ordered apex-to-base stack of short-axis slices.
///
/// Invariants checked on construction: at least one slice, every slice (and
/// mask, when present) shares the same grid dimensions and pixel spacing,
/// and the inter-slice gap is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeStack {
    slices: Vec<StackSlice>,
    slice_gap: f64,
    orientation_turns: u8,
}

impl VolumeStack {
    pub fn new(
        slices: Vec<StackSlice>,
        slice_gap: f64,
        orientation_turns: u8,
    ) -> Result<VolumeStack> {
        if slices.is_empty() {
            return Err(Error::Consistency("a volume stack needs at least one slice".into()));
        }
        if !(slice_gap.is_finite() && slice_gap > 0.0) {
            return Err(Error::Consistency(format!(
                "slice gap must be positive and finite, got {slice_gap}"
            )));
        }
        let first = &slices[0].intensity;
        let (w, h) = (first.width(), first.height());
        let (sx, sy) = (first.px_spacing_x(), first.px_spacing_y());
        for (i, slice) in slices.iter().enumerate() {
            let img = &slice.intensity;
            if img.width() != w || img.height() != h {
                return Err(Error::Consistency(format!(
                    "slice {i} is {}x{} but slice 0 is {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
            if img.px_spacing_x() != sx || img.px_spacing_y() != sy {
                return Err(Error::Consistency(format!(
                    "slice {i} spacing differs from slice 0"
                )));
            }
            if let Some(mask) = &slice.mask {
                if mask.width() != w || mask.height() != h {
                    return Err(Error::Consistency(format!(
                        "mask {i} is {}x{} but its slice is {w}x{h}",
                        mask.width(),
                        mask.height()
                    )));
                }
            }
        }
        Ok(VolumeStack { slices, slice_gap, orientation_turns: orientation_turns % 4 })
    }

    pub fn slices(&self) -> &[StackSlice] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<StackSlice> {
        self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice_gap(&self) -> f64 {
        self.slice_gap
    }

    pub fn orientation_turns(&self) -> u8 {
        self.orientation_turns
    }

    pub fn width(&self) -> usize {
        self.slices[0].intensity.width()
    }

    pub fn height(&self) -> usize {
        self.slices[0].intensity.height()
    }

    pub fn px_spacing_x(&self) -> f64 {
        self.slices[0].intensity.px_spacing_x()
    }

    pub fn px_spacing_y(&self) -> f64 {
        self.slices[0].intensity.px_spacing_y()
    }

    /// Returns the stack restricted to slice indices `0..=last`.
    pub fn prefix(&self, last: usize) -> Result<VolumeStack> {
        if last >= self.len() {
            return Err(Error::Input(format!(
                "prefix end {last} out of range for {} slices",
                self.len()
            )));
        }
        VolumeStack::new(
            self.slices[..=last].to_vec(),
            self.slice_gap,
            self.orientation_turns,
        )
    }
}
