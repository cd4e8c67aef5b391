//! Synthetic subject generator.
//!
//! Every clip is built from a unit-norm concept prototype in latent space.
//! A clip adds a small linear-in-time trajectory to the prototype (per-frame
//! "motion"), mixes the resulting latent sequence into EEG channels through
//! a fixed spatial mixing matrix, and smears it with a short temporal kernel,
//! so recovering the latents from EEG is possible but not trivial. Auxiliary
//! modality embeddings are fixed linear views of the same prototype, noised
//! per clip; the text-condition matrix is a clean view, so conditioning
//! carries concept identity exactly.
//!
//! Determinism: dataset-level structure is drawn from a seed derived from the
//! run seed and the subject index; each clip draws from its own seed derived
//! from the dataset seed and the clip id. Clips are generated in parallel and
//! collected in record order, so outputs are byte-identical across thread
//! counts.

use super::{ClipData, ClipRecord, Dataset, EegSegment, ManifestDims};
use crate::config::{DataConfig, ExperimentConfig, Stage};
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Temporal smear kernel length.
pub const EEG_KERNEL_LEN: usize = 9;

/// Dataset-level structure shared by all clips of one subject.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    /// `[concepts, latent_dim]`, rows unit-norm.
    pub prototypes: Array2<f64>,
    /// Spatial mixing `[channels, latent_dim]`.
    pub mixing: Array2<f64>,
    /// Positive temporal kernel, sums to 1.
    pub kernel: Array1<f64>,
    /// `[joint_dim, latent_dim]` per modality.
    pub proj_image: Array2<f64>,
    pub proj_text: Array2<f64>,
    pub proj_depth: Array2<f64>,
    /// `[cond_tokens * cond_dim, latent_dim]`.
    pub proj_cond: Array2<f64>,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

impl SyntheticModel {
    pub fn new(d: &DataConfig, dataset_seed: u64) -> Result<Self> {
        if d.latent_dim > d.channels {
            return Err(Error::Config(format!(
                "latent_dim ({}) exceeds channels ({})",
                d.latent_dim, d.channels
            )));
        }
        let l = d.latent_dim;
        let scale = 1.0 / (l as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(dataset_seed, "model"));
        let mut prototypes = randn(&mut rng, d.concepts, l, 1.0);
        for mut row in prototypes.rows_mut() {
            let n = row.dot(&row).sqrt();
            // A zero draw has probability zero; guard anyway.
            let n = if n > 0.0 { n } else { 1.0 };
            row.mapv_inplace(|v| v / n);
        }
        let mixing = randn(&mut rng, d.channels, l, scale);
        let mut kernel = Array1::from_shape_fn(EEG_KERNEL_LEN, |_| rng.gen_range(0.1..1.0));
        let ksum = kernel.sum();
        kernel.mapv_inplace(|v| v / ksum);
        let proj_image = randn(&mut rng, d.joint_dim, l, scale);
        let proj_text = randn(&mut rng, d.joint_dim, l, scale);
        let proj_depth = randn(&mut rng, d.joint_dim, l, scale);
        let proj_cond = randn(&mut rng, d.cond_tokens * d.cond_dim, l, scale);
        Ok(Self {
            prototypes,
            mixing,
            kernel,
            proj_image,
            proj_text,
            proj_depth,
            proj_cond,
        })
    }

    /// Deterministic EEG synthesis from a latent sequence: hold each frame's
    /// latent over its span of samples, mix spatially, then smear in time
    /// with replicate padding. No noise.
    #[must_use]
    pub fn mix_eeg(&self, latent: &Array2<f64>, samples: usize) -> Array2<f64> {
        let (frames, _) = latent.dim();
        let channels = self.mixing.nrows();
        // [channels, samples] before smearing
        let mut mixed = Array2::zeros((channels, samples));
        for s in 0..samples {
            let f = (s * frames / samples).min(frames - 1);
            let z = latent.row(f);
            let col = self.mixing.dot(&z);
            mixed.column_mut(s).assign(&col);
        }
        let k = self.kernel.len();
        let pad = (k - 1) / 2;
        let mut out = Array2::zeros((channels, samples));
        for ch in 0..channels {
            for t in 0..samples {
                let mut acc = 0.0;
                for (j, &kj) in self.kernel.iter().enumerate() {
                    let idx = (t + j).saturating_sub(pad).min(samples - 1);
                    acc += kj * mixed[[ch, idx]];
                }
                out[[ch, t]] = acc;
            }
        }
        out
    }

    /// Per-frame latents for one clip: prototype plus a linear-in-time
    /// trajectory between two clip-specific anchors.
    #[must_use]
    pub fn clip_latents(
        &self,
        concept: usize,
        frames: usize,
        motion_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f64> {
        let l = self.prototypes.ncols();
        let a0 = randn(rng, 1, l, 1.0).row(0).to_owned();
        let a1 = randn(rng, 1, l, 1.0).row(0).to_owned();
        let mut latent = Array2::zeros((frames, l));
        for i in 0..frames {
            let u = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let motion = &a0 * (1.0 - u) + &a1 * u;
            let z = &self.prototypes.row(concept).to_owned() + &(motion * motion_scale);
            latent.row_mut(i).assign(&z);
        }
        latent
    }

    fn modality_emb(
        &self,
        proj: &Array2<f64>,
        concept: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Array1<f64> {
        let base = proj.dot(&self.prototypes.row(concept));
        let mut v = if noise > 0.0 {
            let eta = Array1::from_shape_fn(base.len(), |_| {
                let e: f64 = rng.sample(StandardNormal);
                e
            });
            base + eta * noise
        } else {
            // Keep the RNG stream aligned across noise settings.
            for _ in 0..base.len() {
                let _: f64 = rng.sample(StandardNormal);
            }
            base
        };
        let n = v.dot(&v).sqrt();
        let n = if n > 0.0 { n } else { 1.0 };
        v.mapv_inplace(|x| x / n);
        v
    }

    /// Clean conditioning matrix for a concept, Frobenius norm 1.
    #[must_use]
    pub fn text_condition(&self, concept: usize, tokens: usize, cond_dim: usize) -> Array2<f64> {
        let flat = self.proj_cond.dot(&self.prototypes.row(concept));
        let mut m = flat.into_shape_with_order((tokens, cond_dim)).expect("cond shape");
        let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = if n > 0.0 { n } else { 1.0 };
        m.mapv_inplace(|v| v / n);
        m
    }
}

fn build_clip(model: &SyntheticModel, d: &DataConfig, record: ClipRecord, clip_seed: u64) -> ClipData {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let latent = model.clip_latents(record.concept, d.frames, d.motion_scale, &mut rng);
    let mut eeg = model.mix_eeg(&latent, d.samples);
    if d.noise_eeg > 0.0 {
        for v in &mut eeg {
            let e: f64 = rng.sample(StandardNormal);
            *v += d.noise_eeg * e;
        }
    } else {
        for _ in 0..eeg.len() {
            let _: f64 = rng.sample(StandardNormal);
        }
    }
    let image_emb = model.modality_emb(&model.proj_image, record.concept, d.noise_emb, &mut rng);
    let text_emb = model.modality_emb(&model.proj_text, record.concept, d.noise_emb, &mut rng);
    let depth_emb = model.modality_emb(&model.proj_depth, record.concept, d.noise_emb, &mut rng);
    let text_cond = model.text_condition(record.concept, d.cond_tokens, d.cond_dim);
    ClipData {
        record,
        eeg: EegSegment { data: eeg },
        latent,
        image_emb,
        text_emb,
        depth_emb,
        text_cond,
    }
}

/// Generate one subject's dataset from the experiment config.
pub fn generate_synthetic(cfg: &ExperimentConfig, subject: usize) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    if subject >= d.subjects {
        return Err(Error::Config(format!(
            "subject index {subject} out of range 0..{}",
            d.subjects
        )));
    }
    let dataset_seed = derive_seed(cfg.run.seed, &format!("data_s{subject}"));
    let model = SyntheticModel::new(d, dataset_seed)?;

    let per_concept = d.clips_per_block / d.concepts;
    let mut records = Vec::with_capacity(d.blocks * d.clips_per_block);
    for block in 1..=d.blocks {
        for concept in 0..d.concepts {
            for index in 0..per_concept {
                records.push(ClipRecord {
                    clip_id: ClipRecord::make_id(block, concept, index),
                    concept,
                    block,
                    index,
                    subject,
                });
            }
        }
    }

    let clips: Vec<ClipData> = records
        .into_par_iter()
        .map(|record| {
            let clip_seed = derive_seed(dataset_seed, &record.clip_id);
            build_clip(&model, d, record, clip_seed)
        })
        .collect();

    let ds = Dataset {
        dims: ManifestDims::from(d),
        clips,
        seed: cfg.run.seed,
        config_hash: cfg.stage_hash(Stage::Gen),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.channels = 6;
        cfg.data.samples = 40;
        cfg.data.frames = 4;
        cfg.data.window = 16;
        cfg.data.concepts = 3;
        cfg.data.blocks = 2;
        cfg.data.clips_per_block = 6;
        cfg.data.latent_dim = 4;
        cfg.data.joint_dim = 8;
        cfg.data.cond_tokens = 2;
        cfg.data.cond_dim = 5;
        cfg
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg, 0).unwrap();
        let b = generate_synthetic(&cfg, 0).unwrap();
        assert_eq!(a.clips.len(), b.clips.len());
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.eeg.data, y.eeg.data);
            assert_eq!(x.latent, y.latent);
            assert_eq!(x.image_emb, y.image_emb);
            assert_eq!(x.text_cond, y.text_cond);
        }
    }

    #[test]
    fn seeds_change_content() {
        let cfg = small_cfg();
        let mut cfg2 = cfg.clone();
        cfg2.run.seed = cfg.run.seed + 1;
        let a = generate_synthetic(&cfg, 0).unwrap();
        let b = generate_synthetic(&cfg2, 0).unwrap();
        assert_ne!(a.clips[0].eeg.data, b.clips[0].eeg.data);
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let cfg = small_cfg();
        let model = SyntheticModel::new(&cfg.data, 123).unwrap();
        for row in model.prototypes.rows() {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-12);
        }
        let ks = model.kernel.sum();
        assert_abs_diff_eq!(ks, 1.0, epsilon = 1e-12);
        assert!(model.kernel.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn conditioning_is_clean_and_normalized() {
        let cfg = small_cfg();
        let ds = generate_synthetic(&cfg, 0).unwrap();
        // Same concept in different blocks shares the identical condition.
        let a = ds
            .clips
            .iter()
            .find(|c| c.record.concept == 1 && c.record.block == 1)
            .unwrap();
        let b = ds
            .clips
            .iter()
            .find(|c| c.record.concept == 1 && c.record.block == 2)
            .unwrap();
        assert_eq!(a.text_cond, b.text_cond);
        let fro = a.text_cond.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(fro, 1.0, epsilon = 1e-12);
        // Different concepts get different conditions.
        let c = ds.clips.iter().find(|x| x.record.concept == 2).unwrap();
        assert_ne!(a.text_cond, c.text_cond);
    }

    #[test]
    fn noiseless_embeddings_depend_only_on_concept() {
        let cfg = small_cfg();
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let same: Vec<_> = ds.clips.iter().filter(|c| c.record.concept == 0).collect();
        assert!(same.len() >= 2);
        for c in &same[1..] {
            assert_eq!(same[0].image_emb, c.image_emb);
            assert_eq!(same[0].text_emb, c.text_emb);
            assert_eq!(same[0].depth_emb, c.depth_emb);
        }
        // Motion anchors differ per clip, so EEG differs within a concept.
        assert_ne!(same[0].eeg.data, same[1].eeg.data);
    }

    #[test]
    fn embedding_noise_perturbs_but_keeps_unit_norm() {
        let mut cfg = small_cfg();
        cfg.data.noise_emb = 0.2;
        let noisy = generate_synthetic(&cfg, 0).unwrap();
        cfg.data.noise_emb = 0.0;
        let clean = generate_synthetic(&cfg, 0).unwrap();
        assert_ne!(noisy.clips[0].image_emb, clean.clips[0].image_emb);
        let n = noisy.clips[0].image_emb.dot(&noisy.clips[0].image_emb).sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
        // The clean parts of the stream are unaffected by the noise flag.
        assert_eq!(noisy.clips[0].latent, clean.clips[0].latent);
        assert_eq!(noisy.clips[0].eeg.data, clean.clips[0].eeg.data);
    }

    #[test]
    fn noiseless_eeg_equals_model_mixing() {
        let cfg = small_cfg();
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let seed = derive_seed(cfg.run.seed, "data_s0");
        let model = SyntheticModel::new(&cfg.data, seed).unwrap();
        let c = &ds.clips[3];
        let mixed = model.mix_eeg(&c.latent, cfg.data.samples);
        assert_eq!(c.eeg.data, mixed);
    }

    #[test]
    fn mixing_is_linear_in_latents() {
        let cfg = small_cfg();
        let model = SyntheticModel::new(&cfg.data, 9).unwrap();
        let a = Array2::from_shape_fn((4, 4), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let b = Array2::from_shape_fn((4, 4), |(i, j)| (3 * i + j) as f64 * -0.05);
        let sum = model.mix_eeg(&(&a + &b), 40);
        let parts = model.mix_eeg(&a, 40) + model.mix_eeg(&b, 40);
        for (x, y) in sum.iter().zip(parts.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_latents_survive_smearing() {
        // The kernel sums to 1, so a constant mixed signal stays constant.
        let cfg = small_cfg();
        let model = SyntheticModel::new(&cfg.data, 5).unwrap();
        let z = Array2::from_elem((4, 4), 0.7);
        let eeg = model.mix_eeg(&z, 40);
        let expected = model.mixing.dot(&z.row(0));
        for ch in 0..eeg.nrows() {
            for t in 0..eeg.ncols() {
                assert_abs_diff_eq!(eeg[[ch, t]], expected[ch], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn piecewise_hold_assigns_samples_to_frames() {
        let mut cfg = small_cfg();
        cfg.data.samples = 16;
        cfg.data.frames = 2;
        cfg.data.window = 16;
        cfg.data.latent_dim = 1;
        cfg.data.channels = 1;
        let model = SyntheticModel::new(&cfg.data, 3).unwrap();
        let mut z = Array2::zeros((2, 1));
        z[[0, 0]] = 1.0;
        z[[1, 0]] = -1.0;
        let eeg = model.mix_eeg(&z, 16);
        let w = model.mixing[[0, 0]];
        // Frame 0 holds samples 0..8, frame 1 holds 8..16. Away from the
        // boundary the 9-tap smear window sees a single frame.
        assert_abs_diff_eq!(eeg[[0, 2]], w, epsilon = 1e-12);
        assert_abs_diff_eq!(eeg[[0, 13]], -w, epsilon = 1e-12);
    }

    #[test]
    fn subject_index_bounds_checked() {
        let cfg = small_cfg();
        assert!(generate_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn subjects_differ() {
        let mut cfg = small_cfg();
        cfg.data.subjects = 2;
        let a = generate_synthetic(&cfg, 0).unwrap();
        let b = generate_synthetic(&cfg, 1).unwrap();
        assert_ne!(a.clips[0].eeg.data, b.clips[0].eeg.data);
        assert_eq!(b.clips[0].record.subject, 1);
    }
}
