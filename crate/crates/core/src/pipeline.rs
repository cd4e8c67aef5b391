//! Staged experiment runs with content-addressed caching.
//!
//! Each stage writes its artifacts under `root/<stage>/<hash>/`, where the
//! hash covers exactly the config sections that stage reads. Rerunning an
//! unchanged config loads every stage from cache, and a variant that only
//! edits a later section (a guidance flag, the contrastive weights) reuses
//! the earlier directories untouched.
//!
//! A finished directory contains a `.complete` marker. Stages build in a
//! scratch directory next to the target and rename it into place, so an
//! interrupted run leaves no half-written cache entry and two processes
//! racing on the same entry resolve to whichever committed first.
//!
//! A fresh stage returns its artifacts by reading back what it just
//! committed, not the values it held in memory. Stored tensors are f32, so
//! this keeps a run that computed a stage byte-for-byte consistent with a
//! later run that loads it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array1;

use crate::checkpoint;
use crate::config::{EncoderKind, ExperimentConfig, Stage};
use crate::dataset::{generate_synthetic, load_dataset, save_dataset, Dataset};
use crate::embedding::derive_seed;
use crate::encoders::{MlpEncoder, PretrainedAdapter, SemanticEncoder};
use crate::error::{Error, Result};
use crate::inference::{load_reconstruction, reconstruct, save_reconstruction, ReconstructionSet};
use crate::metrics::{evaluate, load_report, save_report, MetricsReport};
use crate::perceptual::{train_perceptual, CausalSeqModel};
use crate::semantic::{train_semantic, SemanticHead};

/// Environment variable naming the artifact root.
pub const CACHE_ENV: &str = "MINDCINE_CACHE";

const DONE: &str = ".complete";
const REPORT_FILE: &str = "report.json";

/// Artifact root: the explicit path if given, else `$MINDCINE_CACHE`, else
/// `mindcine-cache` in the working directory.
pub fn resolve_cache_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("mindcine-cache"))
}

/// Cache directory for one stage of one config.
pub fn stage_dir(root: &Path, cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    root.join(stage.name()).join(cfg.stage_hash(stage))
}

fn is_complete(dir: &Path) -> bool {
    dir.join(DONE).exists()
}

fn scratch_for(dir: &Path) -> Result<PathBuf> {
    let parent = dir
        .parent()
        .ok_or_else(|| Error::Validation(format!("cache dir {} has no parent", dir.display())))?;
    std::fs::create_dir_all(parent)?;
    let name = format!(
        "{}.wip-{}",
        dir.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    );
    let scratch = parent.join(name);
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    std::fs::create_dir_all(&scratch)?;
    Ok(scratch)
}

/// Mark the scratch directory finished and move it into place. If another
/// process committed the same entry first, keep theirs and discard ours.
fn commit(scratch: &Path, dir: &Path) -> Result<()> {
    std::fs::write(scratch.join(DONE), b"")?;
    match std::fs::rename(scratch, dir) {
        Ok(()) => Ok(()),
        Err(_) if is_complete(dir) => {
            let _ = std::fs::remove_dir_all(scratch);
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn subject_dir(dir: &Path, subject: usize) -> PathBuf {
    dir.join(format!("s{subject}"))
}

/// Validate the config and pin the seed. In non-deterministic mode the
/// configured seed is replaced by one drawn from OS entropy and logged, and
/// the returned config is marked deterministic so the run can be replayed
/// exactly and its artifacts cached under the substituted seed.
pub fn resolve_run_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if !cfg.run.deterministic {
        let drawn: u64 = rand::random();
        log::info!(
            "non-deterministic run: drew seed {drawn}; replay with run.seed = {drawn} and run.deterministic = true"
        );
        cfg.run.seed = drawn;
        cfg.run.deterministic = true;
    }
    Ok(cfg)
}

/// Generate (or load) every subject's dataset.
pub fn ensure_datasets(cfg: &ExperimentConfig, root: &Path) -> Result<(PathBuf, Vec<Dataset>)> {
    let dir = stage_dir(root, cfg, Stage::Gen);
    if !is_complete(&dir) {
        log::info!(
            "gen: seed {}, {} subject(s), {} concepts x {} blocks x {} clips",
            cfg.run.seed,
            cfg.data.subjects,
            cfg.data.concepts,
            cfg.data.blocks,
            cfg.data.clips_per_block
        );
        let scratch = scratch_for(&dir)?;
        for s in 0..cfg.data.subjects {
            let ds = generate_synthetic(cfg, s)?;
            save_dataset(&subject_dir(&scratch, s), &ds)?;
        }
        commit(&scratch, &dir)?;
    } else {
        log::info!("gen: cached at {}", dir.display());
    }
    let mut sets = Vec::with_capacity(cfg.data.subjects);
    for s in 0..cfg.data.subjects {
        sets.push(load_dataset(&subject_dir(&dir, s))?);
    }
    Ok((dir, sets))
}

/// Construct the configured semantic encoder for one subject, untrained.
///
/// The adapter stands in for a pretrained EEG backbone: its frozen feature
/// bank is the flattened raw EEG of every clip in the subject's dataset, so
/// only the linear probe on top has trainable parameters.
pub fn build_encoder(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    subject: usize,
) -> Result<Box<dyn SemanticEncoder>> {
    let seed = derive_seed(cfg.run.seed, &format!("encoder_s{subject}"));
    match cfg.semantic.encoder {
        EncoderKind::Mlp => Ok(Box::new(MlpEncoder::new(
            cfg.data.channels,
            cfg.data.samples,
            &cfg.semantic.hidden,
            cfg.data.joint_dim,
            seed,
        )?)),
        EncoderKind::Adapter => {
            let features: BTreeMap<String, Array1<f64>> = ds
                .clips
                .iter()
                .map(|c| {
                    let flat = Array1::from_iter(c.eeg.data.iter().copied());
                    (c.record.clip_id.clone(), flat)
                })
                .collect();
            Ok(Box::new(PretrainedAdapter::new(
                features,
                cfg.data.joint_dim,
                seed,
            )?))
        }
    }
}

fn build_head(cfg: &ExperimentConfig) -> Result<SemanticHead> {
    SemanticHead::new(
        cfg.data.joint_dim,
        cfg.data.cond_tokens,
        cfg.data.cond_dim,
        cfg.semantic.tau_init,
        cfg.semantic.share_tau,
        cfg.semantic.learn_tau,
        derive_seed(cfg.run.seed, "semantic_head"),
    )
}

fn build_seq_model(cfg: &ExperimentConfig, subject: usize) -> Result<CausalSeqModel> {
    CausalSeqModel::new(
        &cfg.perceptual,
        cfg.data.channels,
        cfg.data.window,
        cfg.data.frames,
        cfg.data.latent_dim,
        derive_seed(cfg.run.seed, &format!("perceptual_s{subject}")),
    )
}

/// One subject's trained semantic stack.
pub struct SemanticModels {
    pub encoder: Box<dyn SemanticEncoder>,
    pub head: SemanticHead,
}

fn load_semantic_models(
    dir: &Path,
    cfg: &ExperimentConfig,
    sets: &[Dataset],
) -> Result<Vec<SemanticModels>> {
    let mut out = Vec::with_capacity(sets.len());
    for (s, ds) in sets.iter().enumerate() {
        let mut encoder = build_encoder(cfg, ds, s)?;
        let mut head = build_head(cfg)?;
        checkpoint::load_semantic(&subject_dir(dir, s), cfg, &mut *encoder, &mut head)?;
        out.push(SemanticModels { encoder, head });
    }
    Ok(out)
}

/// Train (or load) the semantic encoder and head for every subject.
pub fn ensure_semantic(
    cfg: &ExperimentConfig,
    root: &Path,
    sets: &[Dataset],
) -> Result<(PathBuf, Vec<SemanticModels>)> {
    let dir = stage_dir(root, cfg, Stage::TrainSemantic);
    if !is_complete(&dir) {
        log::info!(
            "train-semantic: {} epochs on {} subject(s)",
            cfg.semantic.epochs,
            sets.len()
        );
        let scratch = scratch_for(&dir)?;
        for (s, ds) in sets.iter().enumerate() {
            let mut encoder = build_encoder(cfg, ds, s)?;
            let training = train_semantic(cfg, ds, &mut *encoder)?;
            if let Some(best) = training.best_epoch {
                log::info!("train-semantic s{s}: kept epoch {best}");
            }
            checkpoint::save_semantic(&subject_dir(&scratch, s), cfg, &*encoder, &training.head)?;
        }
        commit(&scratch, &dir)?;
    } else {
        log::info!("train-semantic: cached at {}", dir.display());
    }
    let models = load_semantic_models(&dir, cfg, sets)?;
    Ok((dir, models))
}

/// Train (or load) the perceptual sequence model for every subject.
pub fn ensure_perceptual(
    cfg: &ExperimentConfig,
    root: &Path,
    sets: &[Dataset],
) -> Result<(PathBuf, Vec<CausalSeqModel>)> {
    let dir = stage_dir(root, cfg, Stage::TrainPerceptual);
    if !is_complete(&dir) {
        log::info!(
            "train-perceptual: {} epochs on {} subject(s)",
            cfg.perceptual.epochs,
            sets.len()
        );
        let scratch = scratch_for(&dir)?;
        for (s, ds) in sets.iter().enumerate() {
            let training = train_perceptual(cfg, ds)?;
            if let Some(best) = training.best_epoch {
                log::info!("train-perceptual s{s}: kept epoch {best}");
            }
            checkpoint::save_perceptual(&subject_dir(&scratch, s), cfg, &training.model)?;
        }
        commit(&scratch, &dir)?;
    } else {
        log::info!("train-perceptual: cached at {}", dir.display());
    }
    let mut models = Vec::with_capacity(sets.len());
    for s in 0..sets.len() {
        let mut model = build_seq_model(cfg, s)?;
        checkpoint::load_perceptual(&subject_dir(&dir, s), cfg, &mut model)?;
        models.push(model);
    }
    Ok((dir, models))
}

/// Reconstruct (or load) every subject's held-out clips.
pub fn ensure_reconstructions(
    cfg: &ExperimentConfig,
    root: &Path,
    sets: &[Dataset],
    semantic: &[SemanticModels],
    perceptual: &[CausalSeqModel],
) -> Result<(PathBuf, Vec<ReconstructionSet>)> {
    let dir = stage_dir(root, cfg, Stage::Reconstruct);
    if !is_complete(&dir) {
        log::info!("reconstruct: guidance scale {}", cfg.guidance.scale);
        let scratch = scratch_for(&dir)?;
        for (s, ds) in sets.iter().enumerate() {
            let set = reconstruct(cfg, ds, &*semantic[s].encoder, &semantic[s].head, &perceptual[s])?;
            save_reconstruction(&subject_dir(&scratch, s), &set)?;
        }
        commit(&scratch, &dir)?;
    } else {
        log::info!("reconstruct: cached at {}", dir.display());
    }
    let mut out = Vec::with_capacity(sets.len());
    for s in 0..sets.len() {
        out.push(load_reconstruction(&subject_dir(&dir, s))?);
    }
    Ok((dir, out))
}

/// Evaluate (or load) the metrics report.
pub fn ensure_report(
    cfg: &ExperimentConfig,
    root: &Path,
    sets: &[Dataset],
    recons: &[ReconstructionSet],
) -> Result<(PathBuf, MetricsReport)> {
    let dir = stage_dir(root, cfg, Stage::Eval);
    let path = dir.join(REPORT_FILE);
    if !is_complete(&dir) {
        log::info!("eval: {} subject(s)", sets.len());
        let pairs: Vec<(&Dataset, &ReconstructionSet)> =
            sets.iter().zip(recons.iter()).collect();
        let report = evaluate(cfg, &pairs)?;
        let scratch = scratch_for(&dir)?;
        save_report(&scratch.join(REPORT_FILE), &report)?;
        commit(&scratch, &dir)?;
    } else {
        log::info!("eval: cached at {}", dir.display());
    }
    let report = load_report(&path)?;
    Ok((path, report))
}

/// Where a finished run left its artifacts.
#[derive(Debug)]
pub struct RunArtifacts {
    /// The config the run actually used, seed substitution included.
    pub config: ExperimentConfig,
    pub dataset_dir: PathBuf,
    pub semantic_dir: PathBuf,
    pub perceptual_dir: PathBuf,
    pub reconstruction_dir: PathBuf,
    pub report_path: PathBuf,
    pub report: MetricsReport,
}

/// Run the whole pipeline, loading every already-cached stage.
///
/// A stage failure propagates immediately: later stages never start and the
/// committed directories of earlier stages are left in place.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunArtifacts> {
    let cfg = resolve_run_config(cfg)?;
    log::info!(
        "run: config {}, seed {}, cache {}",
        &cfg.hash()[..12],
        cfg.run.seed,
        root.display()
    );
    let (dataset_dir, sets) = ensure_datasets(&cfg, root)?;
    let (semantic_dir, semantic) = ensure_semantic(&cfg, root, &sets)?;
    let (perceptual_dir, perceptual) = ensure_perceptual(&cfg, root, &sets)?;
    let (reconstruction_dir, recons) =
        ensure_reconstructions(&cfg, root, &sets, &semantic, &perceptual)?;
    let (report_path, report) = ensure_report(&cfg, root, &sets, &recons)?;
    Ok(RunArtifacts {
        config: cfg,
        dataset_dir,
        semantic_dir,
        perceptual_dir,
        reconstruction_dir,
        report_path,
        report,
    })
}

/// The standard comparison matrix, in presentation order.
pub const VARIANT_NAMES: [&str; 6] = [
    "full",
    "wo_semantic",
    "wo_perception",
    "text",
    "text_depth",
    "text_image",
];

/// Apply one named variant's config delta to a base config.
pub fn variant_config(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match name {
        "full" => {}
        "wo_semantic" => cfg.guidance.use_semantic = false,
        "wo_perception" => cfg.guidance.use_perceptual = false,
        "text" => cfg.semantic.alphas = [0.0, 1.0, 0.0],
        "text_depth" => cfg.semantic.alphas = [0.0, 0.5, 0.5],
        "text_image" => cfg.semantic.alphas = [0.5, 0.5, 0.0],
        other => {
            return Err(Error::Validation(format!(
                "unknown ablation variant {other:?}; known: {}",
                VARIANT_NAMES.join(", ")
            )))
        }
    }
    Ok(cfg)
}

fn allowed_delta(name: &str) -> &'static [&'static str] {
    match name {
        "full" => &[],
        "wo_semantic" => &["guidance.use_semantic"],
        "wo_perception" => &["guidance.use_perceptual"],
        _ => &["semantic.alphas"],
    }
}

/// Dotted paths at which two configs differ.
pub fn config_delta(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<Vec<String>> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                let keys: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
                for k in keys {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    match (ma.get(k), mb.get(k)) {
                        (Some(x), Some(y)) => walk(&path, x, y, out),
                        _ => out.push(path),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    let mut out = Vec::new();
    walk("", &va, &vb, &mut out);
    Ok(out)
}

/// The resolved variant set for one comparison run.
///
/// Construction verifies that every variant differs from the base only at
/// its documented config paths, shares the base seed, and that no two
/// variants hash identically.
#[derive(Debug)]
pub struct AblationPlan {
    base: ExperimentConfig,
    variants: Vec<(String, ExperimentConfig)>,
}

impl AblationPlan {
    pub fn standard(base: &ExperimentConfig) -> Result<Self> {
        let base = resolve_run_config(base)?;
        let mut variants = Vec::with_capacity(VARIANT_NAMES.len());
        for name in VARIANT_NAMES {
            let v = variant_config(&base, name)?;
            let delta = config_delta(&base, &v)?;
            let allowed = allowed_delta(name);
            if let Some(stray) = delta.iter().find(|d| !allowed.contains(&d.as_str())) {
                return Err(Error::Validation(format!(
                    "variant {name} changed {stray}, outside its documented delta {allowed:?}"
                )));
            }
            variants.push((name.to_string(), v));
        }
        for i in 0..variants.len() {
            for j in i + 1..variants.len() {
                if variants[i].1.hash() == variants[j].1.hash() {
                    return Err(Error::Validation(format!(
                        "variants {} and {} resolve to the same config; the base already \
                         contains one of the deltas",
                        variants[i].0, variants[j].0
                    )));
                }
            }
        }
        Ok(Self { base, variants })
    }

    pub fn base(&self) -> &ExperimentConfig {
        &self.base
    }

    pub fn variants(&self) -> &[(String, ExperimentConfig)] {
        &self.variants
    }
}

/// Reports from one comparison run, in plan order.
pub struct AblationOutcome {
    pub reports: Vec<(String, MetricsReport)>,
}

/// Run every variant against the same cache root. Variants share the base
/// seed by construction, and stages whose hashed inputs agree are computed
/// once and reused.
pub fn run_ablation(plan: &AblationPlan, root: &Path) -> Result<AblationOutcome> {
    let mut reports = Vec::with_capacity(plan.variants.len());
    for (name, vcfg) in &plan.variants {
        log::info!("ablation {name}: config {}", &vcfg.hash()[..12]);
        let arts = run_experiment(vcfg, root)?;
        reports.push((name.clone(), arts.report));
    }
    Ok(AblationOutcome { reports })
}

/// Fixed column order for comparison tables; unknown keys follow sorted.
fn column_order(outcome: &AblationOutcome) -> Vec<String> {
    let preferred = [
        "2way_v",
        "nway_v",
        "2way_f",
        "nway_f",
        "ssim",
        "psnr",
        "hue_pcc",
        "latent_cosine",
    ];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (_, r) in &outcome.reports {
        seen.extend(r.summary.keys().cloned());
    }
    let mut cols: Vec<String> = preferred
        .iter()
        .filter(|k| seen.remove(**k))
        .map(|k| (*k).to_string())
        .collect();
    cols.extend(seen);
    cols
}

/// One table over all variants: rows are variants, columns are metric
/// summaries as `mean ± std`.
pub fn render_ablation(outcome: &AblationOutcome) -> String {
    let cols = column_order(outcome);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["variant".to_string()];
    header.extend(cols.iter().cloned());
    rows.push(header);
    for (name, report) in &outcome.reports {
        let mut row = vec![name.clone()];
        for c in &cols {
            row.push(match report.summary.get(c) {
                Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{cell:<width$}", width = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
