//! Implementations of the individual subcommands. Each function takes its
//! parsed arguments, performs the work through the core library and emits
//! line-delimited JSON reports on stdout.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anatseg_core::anatomy::{delta, AnatomyConfig, AnatomyReport};
use anatseg_core::autoencoder::{train_autoencoder, AeModel, TrainConfig};
use anatseg_core::clinical::{dice, evaluate_stack, fwhm_scar, ScarQuant};
use anatseg_core::latent::{
    build_latent_bank, fit_gmm_em, load_latents, repair_mask, save_latents, select_model,
    GmmBankFile, Provenance, RepairOutcome, EM_MAX_ITER, EM_TOL,
};
use anatseg_core::phantom::{generate_phantoms, PhantomMeta};
use anatseg_core::preprocess::{
    apply_window, clahe, crop_or_pad_mask, crop_or_pad_slice, normalize_by_bloodpool_median,
    quarter_rotate_mask, quarter_rotate_slice, scale_to_byte_range, NormalizationContext,
};
use anatseg_core::stack_io::{load_stack, save_stack};
use anatseg_core::synth::{cine_to_lge, split_seed, SynthParams};
use anatseg_core::volumetric::{select_slices, SelectConfig};
use anatseg_core::{Error, Result, SegMask, StackSlice, StudyMetadata, VolumeStack};
use serde::Serialize;
use serde_json::json;

use crate::{
    BuildBankArgs, FitGmmArgs, GeneratePhantomsArgs, MetricsArgs, PreprocessArgs, RepairArgs,
    ScarArgs, SelectSlicesArgs, SynthArgs, TrainAeArgs, ValidateArgs,
};

/// Prints one report line of JSON.
pub(crate) fn emit<T: Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    println!("{line}");
    Ok(())
}

/// Serializes report lines for a `.jsonl` artifact.
pub(crate) fn to_jsonl<T: Serialize>(lines: &[T]) -> Result<String> {
    let mut out = String::new();
    for line in lines {
        out.push_str(
            &serde_json::to_string(line)
                .map_err(|e| Error::Format(format!("report serialization: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

fn read_anatomy_config(path: Option<&PathBuf>) -> Result<AnatomyConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("anatomy config {}: {e}", p.display())))?
        }
        None => AnatomyConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Standardizes a stack: window, quarter rotation, CLAHE, centered
/// crop-or-pad, and intensity normalization. When blood-pool labels exist
/// anywhere in the volume the blood-pool-median normalization is applied;
/// otherwise each slice is scaled to the byte range over the crop interior.
pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let (stack, meta) = load_stack(&args.stack)?;
    let turns = stack.orientation_turns();
    let mut slices = Vec::with_capacity(stack.len());
    let mut interior = None;
    for slice in stack.slices() {
        let img = apply_window(&slice.intensity, &meta)?;
        let img = quarter_rotate_slice(&img, turns)?;
        let img = clahe(&img, args.clahe_tiles, args.clahe_tiles, args.clahe_clip)?;
        let (img, crop) = crop_or_pad_slice(&img, args.size)?;
        interior = Some(crop.interior_mask());
        let mask = match &slice.mask {
            Some(m) => Some(crop_or_pad_mask(&quarter_rotate_mask(m, turns)?, args.size)?.0),
            None => None,
        };
        slices.push(StackSlice { intensity: img, mask });
    }
    let cropped = VolumeStack::new(slices, stack.slice_gap(), 0)?;
    let region = interior.expect("a loaded stack has at least one slice");
    let has_blood = cropped
        .slices()
        .iter()
        .any(|s| s.mask.as_ref().is_some_and(|m| !m.blood_pool().is_empty()));
    let normalized = if has_blood {
        let ctx = NormalizationContext::from_volume(&cropped, region)?;
        normalize_by_bloodpool_median(&cropped, &ctx)?
    } else {
        let slices = cropped
            .slices()
            .iter()
            .map(|s| {
                Ok(StackSlice {
                    intensity: scale_to_byte_range(&s.intensity, &region)?,
                    mask: s.mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        VolumeStack::new(slices, cropped.slice_gap(), 0)?
    };
    // Window and rotation are consumed, so the stored metadata is neutral.
    let out_meta = StudyMetadata { patient_id: meta.patient_id.clone(), ..StudyMetadata::default() };
    save_stack(&args.out, &normalized, &out_meta)?;
    emit(&json!({
        "slices": normalized.len(),
        "size": args.size,
        "normalization": if has_blood { "bloodpool_median" } else { "byte_range" },
        "out": args.out.display().to_string(),
    }))
}

/// Synthesizes a pseudo-LGE stack from cine slices plus myocardium masks,
/// histogram-matched against a reference stack.
pub fn synth(args: &SynthArgs) -> Result<()> {
    let (cine, meta) = load_stack(&args.stack)?;
    let (reference, _) = load_stack(&args.reference)?;
    let mut slices = Vec::with_capacity(cine.len());
    for (i, slice) in cine.slices().iter().enumerate() {
        let mask = slice.mask.as_ref().ok_or_else(|| {
            Error::Input(format!("slice {i} has no mask; synthesis needs myocardium labels"))
        })?;
        let ref_slice = &reference.slices()[i % reference.len()].intensity;
        let params = SynthParams {
            scar_fraction: args.scar_fraction,
            blur_sigma: args.blur_sigma,
            enhancement_gain: args.gain,
            speckle_sigma: args.speckle_sigma,
            rng_seed: split_seed(args.seed, i as u64),
        };
        let (lge, seg) = cine_to_lge(&slice.intensity, mask, ref_slice, &params)?;
        emit(&json!({ "index": i, "scar_pixels": seg.fibrosis().count() }))?;
        slices.push(StackSlice { intensity: lge, mask: Some(seg) });
    }
    let out = VolumeStack::new(slices, cine.slice_gap(), cine.orientation_turns())?;
    save_stack(&args.out, &out, &meta)
}

/// Scales unit-range phantom intensities into the integer-valued u16 space
/// of the stack directory format. Tissue contrast ratios, and with them the
/// FWHM threshold logic, survive the common factor.
pub(crate) fn scale_for_disk(stack: &VolumeStack) -> Result<VolumeStack> {
    let slices = stack
        .slices()
        .iter()
        .map(|s| {
            Ok(StackSlice {
                intensity: s.intensity.map(|v| v.max(0.0) * 1000.0)?,
                mask: s.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeStack::new(slices, stack.slice_gap(), stack.orientation_turns())
}

/// One line of the phantom generation report.
#[derive(Serialize)]
pub(crate) struct PhantomLine {
    pub index: usize,
    #[serde(flatten)]
    pub meta: PhantomMeta,
}

/// Generates the phantom stack and writes it as a stack directory.
pub(crate) fn generate_phantom_stack(
    n: usize,
    params: &anatseg_core::phantom::PhantomParams,
    seed: u64,
    out: &Path,
) -> Result<Vec<PhantomLine>> {
    let set = generate_phantoms(n, params, seed)?;
    let stack = scale_for_disk(&set.stack)?;
    save_stack(out, &stack, &StudyMetadata::default())?;
    Ok(set
        .meta
        .into_iter()
        .enumerate()
        .map(|(index, meta)| PhantomLine { index, meta })
        .collect())
}

pub fn generate_phantoms_cmd(args: &GeneratePhantomsArgs) -> Result<()> {
    let params = anatseg_core::phantom::PhantomParams {
        size: args.size,
        c_fraction: args.c_fraction,
        scar_fraction: args.scar_fraction,
        noise_sigma: args.noise_sigma,
        px_spacing: args.px_spacing,
        slice_gap: args.slice_gap,
    };
    let lines = generate_phantom_stack(args.n, &params, args.seed, &args.out)?;
    for line in &lines {
        emit(line)?;
    }
    Ok(())
}

/// Extracts square myocardium masks from a stack, crop-or-padding slices
/// whose grid differs from `size`.
pub(crate) fn myocardium_masks(
    stack: &VolumeStack,
    size: usize,
) -> Result<Vec<anatseg_core::BinaryMask>> {
    stack
        .slices()
        .iter()
        .enumerate()
        .map(|(i, slice)| {
            let seg = slice
                .mask
                .as_ref()
                .ok_or_else(|| Error::Input(format!("slice {i} has no mask")))?;
            let seg = if seg.width() == size && seg.height() == size {
                seg.clone()
            } else {
                crop_or_pad_mask(seg, size)?.0
            };
            Ok(seg.myocardium())
        })
        .collect()
}

pub fn train_ae(args: &TrainAeArgs) -> Result<()> {
    let (stack, _) = load_stack(&args.masks)?;
    let masks = myocardium_masks(&stack, args.size)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        rng_seed: args.seed,
        ..TrainConfig::default()
    };
    let (model, history) = train_autoencoder(&masks, args.d, &cfg)?;
    model.save(&args.out)?;
    for (epoch, loss) in history.iter().enumerate() {
        emit(&json!({ "epoch": epoch, "loss": loss }))?;
    }
    if let Some(path) = &args.latents_out {
        let latents = masks.iter().map(|m| model.encode(m)).collect::<Result<Vec<_>>>()?;
        save_latents(path, &latents)?;
    }
    emit(&json!({
        "masks": masks.len(),
        "params": model.param_count(),
        "final_loss": history.last(),
        "out": args.out.display().to_string(),
    }))
}

/// Parses a candidate range like `1:8` (inclusive) or a single `3`.
pub(crate) fn parse_k_range(text: &str) -> Result<Vec<usize>> {
    let parse = |part: &str| -> Result<usize> {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("invalid k range component {part:?}")))?;
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        Ok(k)
    };
    let ks = match text.split_once(':') {
        Some((lo, hi)) => {
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            if lo > hi {
                return Err(Error::Parameter(format!("k range {text:?} is empty")));
            }
            (lo..=hi).collect()
        }
        None => vec![parse(text)?],
    };
    Ok(ks)
}

pub fn fit_gmm(args: &FitGmmArgs) -> Result<()> {
    let ks = parse_k_range(&args.k_range)?;
    let points = load_latents(&args.latents)?;
    let selection = select_model(&points, &ks, args.folds, args.reg, args.seed)?;
    for row in &selection.rows {
        emit(&json!({ "k": row.k, "mean_nll": row.mean_nll, "mean_aic": row.mean_aic }))?;
    }
    let fit = fit_gmm_em(&points, selection.chosen_k, args.reg, args.seed, EM_MAX_ITER, EM_TOL)?;
    let anatomy = read_anatomy_config(args.config.as_ref())?;
    GmmBankFile::without_bank(fit.model, anatomy).save(&args.out)?;
    emit(&json!({
        "chosen_k": selection.chosen_k,
        "nll": fit.final_nll,
        "iterations": fit.iterations,
        "out": args.out.display().to_string(),
    }))
}

pub fn build_bank(args: &BuildBankArgs) -> Result<()> {
    let file = GmmBankFile::load(&args.gmm)?;
    let ae = AeModel::load(&args.ae)?;
    let training = match &args.latents {
        Some(path) => load_latents(path)?,
        None => Vec::new(),
    };
    let max_trials = args.max_trials.unwrap_or_else(|| default_trial_budget(args.n));
    let bank = build_latent_bank(&file.gmm, &ae, &file.anatomy, &training, args.n, max_trials, args.seed)?;
    let from_training =
        bank.provenance().iter().filter(|p| matches!(p, Provenance::Training)).count();
    emit(&json!({
        "size": bank.len(),
        "from_training": from_training,
        "acceptance_rate": bank.acceptance_rate(),
        "out": args.out.display().to_string(),
    }))?;
    GmmBankFile { gmm: file.gmm, bank, anatomy: file.anatomy }.save(&args.out)
}

/// Default rejection-sampling budget: generous enough that a mixture fitted
/// on mostly valid training shapes never plausibly exhausts it.
pub(crate) fn default_trial_budget(n: usize) -> u64 {
    (n as u64).saturating_mul(200).max(10_000)
}

/// One line of the validation report.
#[derive(Serialize)]
struct ValidateLine<'a> {
    index: usize,
    #[serde(flatten)]
    report: &'a AnatomyReport,
}

/// Validates every slice; returns the process exit code (0 iff all pass).
pub fn validate(args: &ValidateArgs) -> Result<u8> {
    let (stack, _) = load_stack(&args.stack)?;
    let cfg = read_anatomy_config(args.config.as_ref())?;
    let mut failing = 0usize;
    for (index, slice) in stack.slices().iter().enumerate() {
        let seg = slice
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input(format!("slice {index} has no mask to validate")))?;
        let report = delta(&seg.myocardium(), &cfg);
        if !report.passed {
            failing += 1;
        }
        emit(&ValidateLine { index, report: &report })?;
    }
    emit(&json!({ "slices": stack.len(), "failing": failing, "passed": failing == 0 }))?;
    Ok(if failing == 0 { 0 } else { 2 })
}

/// One line of the repair report.
#[derive(Serialize)]
pub(crate) struct RepairLine {
    pub index: usize,
    #[serde(flatten)]
    pub outcome: RepairOutcome,
    /// Overlap between the repaired myocardium and the input myocardium.
    pub dice_vs_input: f64,
}

/// Relabels a segmentation around a repaired myocardium: repaired pixels
/// keep their fibrosis split where the input agreed, blood-pool labels
/// survive outside the new wall, everything else drops to background.
fn relabel(original: &SegMask, repaired_myo: &anatseg_core::BinaryMask) -> Result<SegMask> {
    let labels = original
        .labels()
        .iter()
        .zip(repaired_myo.pixels())
        .map(|(&label, &myo)| {
            if myo {
                if label == 3 {
                    3
                } else {
                    2
                }
            } else if label == 1 {
                1
            } else {
                0
            }
        })
        .collect();
    SegMask::new(original.width(), original.height(), labels)
}

/// Repairs the myocardium of every slice at the model's input resolution.
/// Slices on a different grid are crop-or-padded for repair and mapped back
/// afterwards, so anything outside the model's field of view is cleared.
pub(crate) fn repair_stack(
    stack: &VolumeStack,
    ae: &AeModel,
    file: &GmmBankFile,
    alpha_steps: usize,
) -> Result<(VolumeStack, Vec<RepairLine>)> {
    let size = ae.input_size();
    let mut slices = Vec::with_capacity(stack.len());
    let mut lines = Vec::with_capacity(stack.len());
    for (index, slice) in stack.slices().iter().enumerate() {
        let seg = slice
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input(format!("slice {index} has no mask to repair")))?;
        let (seg_sq, crop) = crop_or_pad_mask(seg, size)?;
        let myo = seg_sq.myocardium();
        let (repaired, report) = repair_mask(&myo, ae, &file.bank, &file.anatomy, alpha_steps)?;
        let dice_vs_input = dice(&repaired, &myo)?;
        let seg_out = crop.invert_mask(&relabel(&seg_sq, &repaired)?)?;
        lines.push(RepairLine { index, outcome: report.outcome, dice_vs_input });
        slices.push(StackSlice { intensity: slice.intensity.clone(), mask: Some(seg_out) });
    }
    let out = VolumeStack::new(slices, stack.slice_gap(), stack.orientation_turns())?;
    Ok((out, lines))
}

pub fn repair(args: &RepairArgs) -> Result<()> {
    let (stack, meta) = load_stack(&args.stack)?;
    let ae = AeModel::load(&args.ae)?;
    let file = GmmBankFile::load(&args.bank)?;
    let (repaired, lines) = repair_stack(&stack, &ae, &file, args.alpha_steps)?;
    for line in &lines {
        emit(line)?;
    }
    save_stack(&args.out, &repaired, &meta)
}

pub fn select_slices_cmd(args: &SelectSlicesArgs) -> Result<()> {
    let (stack, _) = load_stack(&args.stack)?;
    let selection = select_slices(&stack, &SelectConfig { tau: args.tau })?;
    emit(&selection)?;
    if let Some(path) = &args.out {
        write_text(path, &(serde_json::to_string(&selection).expect("serializable") + "\n"))?;
    }
    Ok(())
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let (pred, _) = load_stack(&args.pred)?;
    let (gt, _) = load_stack(&args.gt)?;
    let report = evaluate_stack(&pred, &gt)?;
    for slice in &report.slices {
        emit(slice)?;
    }
    for bucket in &report.buckets {
        emit(bucket)?;
    }
    write_text(
        &args.out,
        &(serde_json::to_string(&report)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?
            + "\n"),
    )
}

/// One line of the scar report.
#[derive(Serialize)]
pub(crate) struct ScarLine {
    pub index: usize,
    #[serde(flatten)]
    pub quant: ScarQuant,
}

/// Trailing totals line of the scar report.
#[derive(Serialize)]
pub(crate) struct ScarTotals {
    pub slices: usize,
    pub scar_area_mm2_total: f64,
    pub gz_area_mm2_total: f64,
}

pub(crate) fn scar_report(stack: &VolumeStack) -> Result<(Vec<ScarLine>, ScarTotals)> {
    let mut lines = Vec::with_capacity(stack.len());
    let mut totals =
        ScarTotals { slices: stack.len(), scar_area_mm2_total: 0.0, gz_area_mm2_total: 0.0 };
    for (index, slice) in stack.slices().iter().enumerate() {
        let seg = slice
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input(format!("slice {index} has no mask to quantify")))?;
        let quant = fwhm_scar(&slice.intensity, &seg.fibrosis())?;
        totals.scar_area_mm2_total += quant.scar_area_mm2;
        totals.gz_area_mm2_total += quant.gz_area_mm2;
        lines.push(ScarLine { index, quant });
    }
    Ok((lines, totals))
}

pub fn scar(args: &ScarArgs) -> Result<()> {
    let (stack, _) = load_stack(&args.stack)?;
    let (lines, totals) = scar_report(&stack)?;
    for line in &lines {
        emit(line)?;
    }
    emit(&totals)?;
    let mut text = to_jsonl(&lines)?;
    text.push_str(&serde_json::to_string(&totals).expect("serializable"));
    text.push('\n');
    write_text(&args.out, &text)
}
