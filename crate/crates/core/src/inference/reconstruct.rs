//! Reconstruction stage: trained models in, rendered videos out.
//!
//! The denoiser is trained here rather than in its own stage because it is
//! cheap and depends on both upstream models; its training set pairs
//! ground-truth latents from the train split with the conditions the models
//! actually produce. Clips are then reconstructed one at a time so a bad
//! clip surfaces as a partial failure instead of sinking the whole batch.

use super::diffusion::{
    sample_latents, train_diffusion, DiffusionSamples, DiffusionSchedule, NoisePredictor,
};
use super::render::Renderer;
use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, Stage};
use crate::container::{ArrayTable, SCHEMA_VERSION};
use crate::dataset::{ClipRecord, Dataset};
use crate::embedding::derive_seed;
use crate::encoders::SemanticEncoder;
use crate::error::{Error, Result};
use crate::perceptual::{predict_latents, CausalSeqModel};
use crate::semantic::{embed_clips, SemanticHead};
use ndarray::{Array1, Array2, Array4, Axis, Ix3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One reconstructed test clip.
#[derive(Clone, Debug)]
pub struct ReconstructedClip {
    pub record: ClipRecord,
    /// Pooled semantic condition used for guidance, `[cond_dim]`.
    pub semantic_cond: Array1<f64>,
    /// Perceptual frame predictions, `[frames, latent_dim]`.
    pub perceptual: Array2<f64>,
    /// Guided diffusion output, `[frames, latent_dim]`.
    pub diffused: Array2<f64>,
    /// Rendered video, `[frames, h, w, 3]` in `[0, 1]`.
    pub video: Array4<f64>,
}

/// All reconstructions for a run, with enough provenance to trace them.
pub struct ReconstructionSet {
    pub schema_version: u32,
    pub config_hash: String,
    pub revision: String,
    pub seed: u64,
    pub clips: Vec<ReconstructedClip>,
}

/// Mean over condition tokens predicted from joint embeddings.
pub fn pooled_conditions(head: &SemanticHead, e: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let vars = head.params().bind(&mut g);
    let ev = g.constant(e.clone().into_dyn());
    let pc = head.predict_cond(&mut g, &vars, ev);
    let v = g
        .value(pc)
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("condition tokens are rank 3");
    v.mean_axis(Axis(1)).expect("at least one token")
}

/// Reconstruct every test clip. Fails with a partial-failure error if any
/// clip cannot be produced, after attempting all of them.
pub fn reconstruct<E: SemanticEncoder + ?Sized>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    encoder: &E,
    head: &SemanticHead,
    model: &CausalSeqModel,
) -> Result<ReconstructionSet> {
    let (train, test) = ds.split_indices();
    if test.is_empty() {
        return Err(Error::Validation("dataset has no test clips".into()));
    }
    let d = &ds.dims;

    // Denoiser training set: ground-truth latents paired with model-produced
    // conditions on the train split.
    let e_train = embed_clips(encoder, ds, &train, cfg.semantic.batch_size)?;
    let sem_train = pooled_conditions(head, &e_train);
    let perc_train = predict_latents(model, ds, &train, cfg.perceptual.batch_size)?;
    let rows = train.len() * d.frames;
    let mut z0 = Array2::zeros((rows, d.latent_dim));
    let mut sem = Array2::zeros((rows, d.cond_dim));
    let mut perc = Array2::zeros((rows, d.latent_dim));
    for (i, &ci) in train.iter().enumerate() {
        for f in 0..d.frames {
            let r = i * d.frames + f;
            z0.row_mut(r).assign(&ds.clips[ci].latent.row(f));
            sem.row_mut(r).assign(&sem_train.row(i));
            perc.row_mut(r)
                .assign(&perc_train.index_axis(Axis(0), i).row(f));
        }
    }
    let samples = DiffusionSamples { z0, sem, perc };
    let (net, _history) =
        train_diffusion(&cfg.diffusion, &samples, derive_seed(cfg.run.seed, "diffusion"))?;
    let schedule = DiffusionSchedule::new(&cfg.diffusion)?;
    let renderer = Renderer::new(d.latent_dim, cfg.render.height, cfg.render.width)?;

    let e_test = embed_clips(encoder, ds, &test, cfg.semantic.batch_size)?;
    let sem_test = pooled_conditions(head, &e_test);
    let perc_test = predict_latents(model, ds, &test, cfg.perceptual.batch_size)?;

    let sample_seed = derive_seed(cfg.run.seed, "sample");
    let mut clips = Vec::with_capacity(test.len());
    let mut failures: Vec<(String, Error)> = Vec::new();
    for (i, &ci) in test.iter().enumerate() {
        let record = ds.clips[ci].record.clone();
        let out = reconstruct_clip(
            cfg,
            &net,
            &schedule,
            &renderer,
            &record,
            sem_test.row(i).to_owned(),
            perc_test.index_axis(Axis(0), i).to_owned(),
            sample_seed,
        );
        match out {
            Ok(c) => clips.push(c),
            Err(e) => failures.push((record.clip_id.clone(), e)),
        }
    }
    if !failures.is_empty() {
        let (id, err) = &failures[0];
        return Err(Error::PartialFailure {
            failed: failures.len(),
            total: test.len(),
            first: format!("{id}: {err}"),
        });
    }
    Ok(ReconstructionSet {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.stage_hash(Stage::Reconstruct),
        revision: crate::revision(),
        seed: cfg.run.seed,
        clips,
    })
}

/// Sample and render one clip. Seeds derive from the clip id and frame
/// index, so a clip reconstructs identically regardless of batch makeup.
#[allow(clippy::too_many_arguments)]
fn reconstruct_clip(
    cfg: &ExperimentConfig,
    net: &NoisePredictor,
    schedule: &DiffusionSchedule,
    renderer: &Renderer,
    record: &ClipRecord,
    semantic_cond: Array1<f64>,
    perceptual: Array2<f64>,
    sample_seed: u64,
) -> Result<ReconstructedClip> {
    let frames = perceptual.nrows();
    let clip_seed = derive_seed(sample_seed, &record.clip_id);
    let seeds: Vec<u64> = (0..frames)
        .map(|f| derive_seed(clip_seed, &format!("f{f}")))
        .collect();
    let sem_rows = Array2::from_shape_fn((frames, semantic_cond.len()), |(_, j)| semantic_cond[j]);
    let diffused = sample_latents(
        net,
        schedule,
        &cfg.diffusion,
        &cfg.guidance,
        &sem_rows,
        &perceptual,
        &seeds,
    )?;
    let video = renderer.render_video(diffused.view())?;
    Ok(ReconstructedClip {
        record: record.clone(),
        semantic_cond,
        perceptual,
        diffused,
        video,
    })
}

/// Render a clip's ground-truth latents with the same fixed map used for
/// reconstructions.
pub fn render_ground_truth(
    renderer: &Renderer,
    ds: &Dataset,
    idxs: &[usize],
) -> Result<Vec<Array4<f64>>> {
    idxs.iter()
        .map(|&i| renderer.render_video(ds.clips[i].latent.view()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ReconstructionManifest {
    schema_version: u32,
    config_hash: String,
    revision: String,
    seed: u64,
    frames: usize,
    latent_dim: usize,
    cond_dim: usize,
    height: usize,
    width: usize,
    records: Vec<ClipRecord>,
}

/// Write a reconstruction set to `dir` as a manifest plus arrays.
pub fn save_reconstruction(dir: &Path, set: &ReconstructionSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let first = set
        .clips
        .first()
        .ok_or_else(|| Error::Validation("empty reconstruction set".into()))?;
    let frames = first.perceptual.nrows();
    let latent_dim = first.perceptual.ncols();
    let cond_dim = first.semantic_cond.len();
    let (_, height, width, _) = first.video.dim();
    let n = set.clips.len();
    let manifest = ReconstructionManifest {
        schema_version: set.schema_version,
        config_hash: set.config_hash.clone(),
        revision: set.revision.clone(),
        seed: set.seed,
        frames,
        latent_dim,
        cond_dim,
        height,
        width,
        records: set.clips.iter().map(|c| c.record.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut table = ArrayTable::new();
    let mut sem = Vec::with_capacity(n * cond_dim);
    let mut percv = Vec::with_capacity(n * frames * latent_dim);
    let mut diff = Vec::with_capacity(n * frames * latent_dim);
    let mut video = Vec::with_capacity(n * frames * height * width * 3);
    for c in &set.clips {
        sem.extend(c.semantic_cond.iter().map(|&v| v as f32));
        percv.extend(c.perceptual.iter().map(|&v| v as f32));
        diff.extend(c.diffused.iter().map(|&v| v as f32));
        video.extend(c.video.iter().map(|&v| v as f32));
    }
    table.insert("semantic_cond", vec![n, cond_dim], sem)?;
    table.insert("perceptual", vec![n, frames, latent_dim], percv)?;
    table.insert("diffused", vec![n, frames, latent_dim], diff)?;
    table.insert("video", vec![n, frames, height, width, 3], video)?;
    table.save(dir, "reconstruction")
}

/// Load a reconstruction set written by [`save_reconstruction`].
pub fn load_reconstruction(dir: &Path) -> Result<ReconstructionSet> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ReconstructionManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    let table = ArrayTable::load(dir, "reconstruction")?;
    let n = manifest.records.len();
    let (f, l, c) = (manifest.frames, manifest.latent_dim, manifest.cond_dim);
    let (h, w) = (manifest.height, manifest.width);
    let sem = table.get_nd("semantic_cond", &[n, c])?;
    let perc = table.get_nd("perceptual", &[n, f, l])?;
    let diff = table.get_nd("diffused", &[n, f, l])?;
    let video = table.get_nd("video", &[n, f, h, w, 3])?;
    let mut clips = Vec::with_capacity(n);
    for (i, record) in manifest.records.into_iter().enumerate() {
        let semantic_cond = Array1::from_shape_fn(c, |j| f64::from(sem[[i, j]]));
        let perceptual = Array2::from_shape_fn((f, l), |(a, b)| f64::from(perc[[i, a, b]]));
        let diffused = Array2::from_shape_fn((f, l), |(a, b)| f64::from(diff[[i, a, b]]));
        let vid = Array4::from_shape_fn((f, h, w, 3), |(a, y, x, ch)| {
            f64::from(video[[i, a, y, x, ch]])
        });
        clips.push(ReconstructedClip {
            record,
            semantic_cond,
            perceptual,
            diffused,
            video: vid,
        });
    }
    Ok(ReconstructionSet {
        schema_version: manifest.schema_version,
        config_hash: manifest.config_hash,
        revision: manifest.revision,
        seed: manifest.seed,
        clips,
    })
}
