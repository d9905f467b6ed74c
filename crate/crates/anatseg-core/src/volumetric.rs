//! Whole-stack slice-range selection along the apex-to-base axis: per-slice
//! areas, the longest-increasing-subsequence end, the first C-shaped slice,
//! the first large area deviation and the combined kept-slice rule.

use serde::{Deserialize, Serialize};

use crate::anatomy::is_c_shaped;
use crate::stack::VolumeStack;
use crate::{Error, Result};

/// Knobs of [`select_slices`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    /// Relative area collapse that marks a deviation: slice `j` deviates
    /// when `area[j] < (1 - tau) * area[j-1]`.
    pub tau: f64,
}

impl Default for SelectConfig {
    fn default() -> SelectConfig {
        SelectConfig { tau: 0.6 }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Parameter(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// The selection verdict: the three candidate indices, the combined final
/// index and the slices dropped past it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSelection {
    pub areas: Vec<usize>,
    #[serde(rename = "i_M")]
    pub i_m: usize,
    #[serde(rename = "i_C")]
    pub i_c: Option<usize>,
    #[serde(rename = "i_D")]
    pub i_d: Option<usize>,
    #[serde(rename = "i")]
    pub final_index: usize,
    pub dropped: Vec<usize>,
}

/// Per-slice left-ventricle area: the count of myocardium plus blood-pool
/// pixels. Every slice must carry a mask.
pub fn slice_areas(stack: &VolumeStack) -> Result<Vec<usize>> {
    stack
        .slices()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.mask
                .as_ref()
                .map(|m| m.left_ventricle().count())
                .ok_or_else(|| Error::Input(format!("slice {i} has no mask")))
        })
        .collect()
}

/// Final index of the longest strictly-increasing subsequence of `areas`;
/// among subsequences of maximal length the one ending latest wins. An
/// empty input returns 0.
pub fn lis_final_index(areas: &[usize]) -> usize {
    if areas.is_empty() {
        return 0;
    }
    let mut len = vec![1usize; areas.len()];
    for i in 0..areas.len() {
        for j in 0..i {
            if areas[j] < areas[i] {
                len[i] = len[i].max(len[j] + 1);
            }
        }
    }
    let max = *len.iter().max().expect("non-empty");
    len.iter().rposition(|&l| l == max).expect("max exists")
}

/// Index of the first C-shaped myocardium along the stack, if any. Slices
/// without masks are treated as not C-shaped.
pub fn first_c_index(stack: &VolumeStack) -> Option<usize> {
    stack
        .slices()
        .iter()
        .position(|s| s.mask.as_ref().is_some_and(|m| is_c_shaped(&m.myocardium())))
}

/// Last index before the first area collapse: the smallest `j >= 1` with
/// `area[j] < (1 - tau) * area[j-1]` yields `j - 1`; `None` when no slice
/// collapses.
pub fn first_deviation_index(areas: &[usize], tau: f64) -> Option<usize> {
    for j in 1..areas.len() {
        if (areas[j] as f64) < (1.0 - tau) * areas[j - 1] as f64 {
            return Some(j - 1);
        }
    }
    None
}

/// The kept-slice formula `i = max(i_M, min(i_C + 1, i_D))`, with absent
/// terms dropped: no C-shaped slice leaves `i_D`, no deviation leaves
/// `i_C + 1`, and with both absent the min term is the last index. The
/// result is clamped into `0..n`.
pub fn combine_indices(i_m: usize, i_c: Option<usize>, i_d: Option<usize>, n: usize) -> usize {
    debug_assert!(n >= 1);
    let min_term = match (i_c, i_d) {
        (Some(c), Some(d)) => (c + 1).min(d),
        (Some(c), None) => c + 1,
        (None, Some(d)) => d,
        (None, None) => n - 1,
    };
    i_m.max(min_term).min(n - 1)
}

/// Selects the kept apex-to-base slice range of a stack.
///
/// Computes the three candidate indices, combines them via
/// [`combine_indices`], and finally truncates the kept prefix so that it
/// retains at most one C-shaped slice. Depends only on the masks.
pub fn select_slices(stack: &VolumeStack, cfg: &SelectConfig) -> Result<SliceSelection> {
    cfg.validate()?;
    let areas = slice_areas(stack)?;
    let n = areas.len();
    let i_m = lis_final_index(&areas);
    let i_c = first_c_index(stack);
    let i_d = first_deviation_index(&areas, cfg.tau);
    let mut final_index = combine_indices(i_m, i_c, i_d, n);
    // Keep at most one C-shaped slice: cut just before the second one.
    let mut c_seen = 0;
    for (j, slice) in stack.slices().iter().take(final_index + 1).enumerate() {
        let c = slice.mask.as_ref().is_some_and(|m| is_c_shaped(&m.myocardium()));
        if c {
            c_seen += 1;
            if c_seen == 2 {
                final_index = j - 1;
                break;
            }
        }
    }
    let dropped = (final_index + 1..n).collect();
    Ok(SliceSelection { areas, i_m, i_c, i_d, final_index, dropped })
}
