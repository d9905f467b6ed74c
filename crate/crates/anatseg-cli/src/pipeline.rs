//! The `run` subcommand: executes the pipeline stages in order against one
//! config document — phantoms, autoencoder training, mixture selection,
//! bank building, repair, slice selection, metrics and scar quantification —
//! writing every artifact under the configured output directory. Under
//! `--resume`, stages whose recorded input hash still matches are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use anatseg_core::autoencoder::{train_autoencoder, AeModel, TrainConfig};
use anatseg_core::clinical::evaluate_stack;
use anatseg_core::latent::{
    build_latent_bank, fit_gmm_em, load_latents, save_latents, select_model, GmmBankFile,
    EM_MAX_ITER, EM_TOL,
};
use anatseg_core::stack_io::{load_stack, save_stack};
use anatseg_core::synth::split_seed;
use anatseg_core::volumetric::{select_slices, SelectConfig};
use anatseg_core::{Error, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::commands::{
    emit, generate_phantom_stack, myocardium_masks, repair_stack, scar_report, to_jsonl,
    write_text,
};
use crate::config::PipelineConfig;

/// Fixed artifact layout of a pipeline run.
struct Artifacts {
    root: PathBuf,
    phantoms: PathBuf,
    phantom_meta: PathBuf,
    model: PathBuf,
    latents: PathBuf,
    train_log: PathBuf,
    gmm_selection: PathBuf,
    gmm: PathBuf,
    bank: PathBuf,
    repaired: PathBuf,
    repair_report: PathBuf,
    selection: PathBuf,
    metrics: PathBuf,
    scar: PathBuf,
    /// Directory of per-stage input-hash markers driving `--resume`.
    hashes: PathBuf,
}

impl Artifacts {
    fn new(root: &Path) -> Artifacts {
        Artifacts {
            root: root.to_path_buf(),
            phantoms: root.join("phantoms"),
            phantom_meta: root.join("phantom-meta.jsonl"),
            model: root.join("model.aev1"),
            latents: root.join("latents.lat1"),
            train_log: root.join("train-log.jsonl"),
            gmm_selection: root.join("gmm-selection.jsonl"),
            gmm: root.join("gmm.gmb"),
            bank: root.join("bank.gmb"),
            repaired: root.join("repaired"),
            repair_report: root.join("repair-report.jsonl"),
            selection: root.join("selection.json"),
            metrics: root.join("metrics.json"),
            scar: root.join("scar.jsonl"),
            hashes: root.join(".hashes"),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Feeds a file's length and bytes — or a directory's sorted entries,
/// recursively — into the hasher. Missing paths are reported as explicit
/// stage-input errors.
fn hash_path(hasher: &mut Sha256, path: &Path) -> Result<()> {
    if path.is_file() {
        let bytes = fs::read(path)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        return Ok(());
    }
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for entry in entries {
            let name = entry.file_name().expect("read_dir yields named entries");
            hasher.update(name.to_string_lossy().as_bytes());
            hasher.update([0]);
            hash_path(hasher, &entry)?;
        }
        return Ok(());
    }
    Err(Error::Input(format!("missing input artifact {}", path.display())))
}

/// The resume key of a stage: a digest over its name, the config fields it
/// depends on and the full content of its input artifacts.
fn stage_hash(name: &str, config_fragment: &impl Serialize, inputs: &[&Path]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update([0]);
    hasher.update(
        serde_json::to_vec(config_fragment)
            .map_err(|e| Error::Format(format!("config hashing: {e}")))?,
    );
    for path in inputs {
        hasher.update([0]);
        hash_path(&mut hasher, path)?;
    }
    Ok(hex(&hasher.finalize()))
}

/// Re-tags an error with the failing stage while keeping its exit-code
/// class, so `run` failures name their origin.
fn stage_error(stage: &str, err: Error) -> Error {
    let tag = |m: String| format!("stage {stage}: {m}");
    match err {
        Error::Format(m) => Error::Format(tag(m)),
        Error::Consistency(m) => Error::Consistency(tag(m)),
        Error::Label(v) => {
            Error::Format(tag(format!("label value {v} outside the supported range 0..=3")))
        }
        Error::Io(e) => Error::Format(tag(format!("i/o error: {e}"))),
        Error::Parameter(m) => Error::Parameter(tag(m)),
        Error::Input(m) => Error::Input(tag(m)),
        Error::DegenerateRegion(m) => Error::DegenerateRegion(tag(m)),
        Error::Numerical(m) => Error::Numerical(tag(m)),
        Error::Training { epoch, message } => Error::Training { epoch, message: tag(message) },
        Error::SamplingExhausted { accepted, requested, trials, .. } => Error::Numerical(tag(
            format!("rejection sampling exhausted after {trials} trials: {accepted}/{requested} accepted"),
        )),
    }
}

/// Runs one stage unless `--resume` finds its outputs present and its input
/// hash unchanged. The marker is written only after the body succeeds, so an
/// interrupted stage reruns from scratch.
fn stage(
    arts: &Artifacts,
    name: &'static str,
    resume: bool,
    config_fragment: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    let hash = stage_hash(name, config_fragment, inputs).map_err(|e| stage_error(name, e))?;
    let marker = arts.hashes.join(name);
    if resume
        && outputs.iter().all(|p| p.exists())
        && fs::read_to_string(&marker).map(|recorded| recorded == hash).unwrap_or(false)
    {
        emit(&json!({ "stage": name, "status": "skipped" }))?;
        return Ok(());
    }
    body().map_err(|e| stage_error(name, e))?;
    fs::create_dir_all(&arts.hashes)?;
    fs::write(&marker, &hash)?;
    emit(&json!({ "stage": name, "status": "ran" }))?;
    Ok(())
}

pub fn run_pipeline(cfg: &PipelineConfig, resume: bool) -> Result<()> {
    cfg.validate()?;
    let arts = Artifacts::new(&cfg.out_dir);
    fs::create_dir_all(&arts.root)?;

    let phantom_seed = split_seed(cfg.seed, 0);
    let train_seed = split_seed(cfg.seed, 1);
    let gmm_seed = split_seed(cfg.seed, 2);
    let bank_seed = split_seed(cfg.seed, 3);

    stage(
        &arts,
        "phantoms",
        resume,
        &(&cfg.phantoms, phantom_seed),
        &[],
        &[&arts.phantoms, &arts.phantom_meta],
        || {
            let lines = generate_phantom_stack(
                cfg.phantoms.n,
                &cfg.phantoms.params(),
                phantom_seed,
                &arts.phantoms,
            )?;
            write_text(&arts.phantom_meta, &to_jsonl(&lines)?)
        },
    )?;

    stage(
        &arts,
        "train-ae",
        resume,
        &(&cfg.train, cfg.phantoms.size, train_seed),
        &[&arts.phantoms],
        &[&arts.model, &arts.latents, &arts.train_log],
        || {
            let (stack, _) = load_stack(&arts.phantoms)?;
            let masks = myocardium_masks(&stack, cfg.phantoms.size)?;
            let tc = TrainConfig {
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                learning_rate: cfg.train.learning_rate,
                rng_seed: train_seed,
                ..TrainConfig::default()
            };
            let (model, history) = train_autoencoder(&masks, cfg.train.d, &tc)?;
            model.save(&arts.model)?;
            let latents = masks.iter().map(|m| model.encode(m)).collect::<Result<Vec<_>>>()?;
            save_latents(&arts.latents, &latents)?;
            let log: Vec<_> = history
                .iter()
                .enumerate()
                .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }))
                .collect();
            write_text(&arts.train_log, &to_jsonl(&log)?)
        },
    )?;

    stage(
        &arts,
        "fit-gmm",
        resume,
        &(&cfg.gmm, &cfg.anatomy, gmm_seed),
        &[&arts.latents],
        &[&arts.gmm, &arts.gmm_selection],
        || {
            let points = load_latents(&arts.latents)?;
            let ks: Vec<usize> = (cfg.gmm.k_min..=cfg.gmm.k_max).collect();
            let selection = select_model(&points, &ks, cfg.gmm.folds, cfg.gmm.reg, gmm_seed)?;
            write_text(&arts.gmm_selection, &to_jsonl(&selection.rows)?)?;
            let fit =
                fit_gmm_em(&points, selection.chosen_k, cfg.gmm.reg, gmm_seed, EM_MAX_ITER, EM_TOL)?;
            GmmBankFile::without_bank(fit.model, cfg.anatomy).save(&arts.gmm)
        },
    )?;

    stage(
        &arts,
        "build-bank",
        resume,
        &(&cfg.bank, bank_seed),
        &[&arts.gmm, &arts.model, &arts.latents],
        &[&arts.bank],
        || {
            let file = GmmBankFile::load(&arts.gmm)?;
            let ae = AeModel::load(&arts.model)?;
            let training = load_latents(&arts.latents)?;
            let bank = build_latent_bank(
                &file.gmm,
                &ae,
                &file.anatomy,
                &training,
                cfg.bank.n,
                cfg.bank.max_trials,
                bank_seed,
            )?;
            GmmBankFile { gmm: file.gmm, bank, anatomy: file.anatomy }.save(&arts.bank)
        },
    )?;

    stage(
        &arts,
        "repair",
        resume,
        &cfg.alpha_steps,
        &[&arts.phantoms, &arts.model, &arts.bank],
        &[&arts.repaired, &arts.repair_report],
        || {
            let (stack, meta) = load_stack(&arts.phantoms)?;
            let ae = AeModel::load(&arts.model)?;
            let file = GmmBankFile::load(&arts.bank)?;
            let (repaired, lines) = repair_stack(&stack, &ae, &file, cfg.alpha_steps)?;
            save_stack(&arts.repaired, &repaired, &meta)?;
            write_text(&arts.repair_report, &to_jsonl(&lines)?)
        },
    )?;

    stage(
        &arts,
        "select-slices",
        resume,
        &cfg.tau,
        &[&arts.repaired],
        &[&arts.selection],
        || {
            let (stack, _) = load_stack(&arts.repaired)?;
            let selection = select_slices(&stack, &SelectConfig { tau: cfg.tau })?;
            let line = serde_json::to_string(&selection)
                .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
            write_text(&arts.selection, &(line + "\n"))
        },
    )?;

    stage(&arts, "metrics", resume, &(), &[&arts.repaired, &arts.phantoms], &[&arts.metrics], || {
        let (pred, _) = load_stack(&arts.repaired)?;
        let (gt, _) = load_stack(&arts.phantoms)?;
        let report = evaluate_stack(&pred, &gt)?;
        let line = serde_json::to_string(&report)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        write_text(&arts.metrics, &(line + "\n"))
    })?;

    stage(&arts, "scar", resume, &(), &[&arts.repaired], &[&arts.scar], || {
        let (stack, _) = load_stack(&arts.repaired)?;
        let (lines, totals) = scar_report(&stack)?;
        let mut text = to_jsonl(&lines)?;
        text.push_str(&serde_json::to_string(&totals).expect("serializable"));
        text.push('\n');
        write_text(&arts.scar, &text)
    })?;

    Ok(())
}
