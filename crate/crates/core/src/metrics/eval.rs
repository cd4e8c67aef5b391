//! Scores reconstructions against their ground truth and assembles the
//! report.
//!
//! Identification metrics come in two flavors sharing the same trial
//! machinery: `*_v` classifies whole clips, `*_f` classifies frames and
//! averages the per-frame logits. Pixel metrics compare each reconstructed
//! video with a render of the clip's true latents. Reconstructions that
//! cannot be paired with ground truth are excluded and listed in the
//! report rather than failing the run.

use super::classify::{
    calibrated_random_scores, frame_feature_rows, oracle_scores, video_features,
    LogisticClassifier,
};
use super::{
    hue_pcc_video, nway_topk, psnr_video, ssim_video, summarize, summarize_by_subject,
    ClipMetrics, MetricValue, MetricsReport,
};
use crate::config::{ClassifierKind, ExperimentConfig, Stage};
use crate::container::SCHEMA_VERSION;
use crate::dataset::Dataset;
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use crate::inference::{render_ground_truth, ReconstructionSet, Renderer};
use ndarray::{Array2, Array4, ArrayView2, Axis};
use std::collections::BTreeMap;

/// Mean over frames of the cosine between predicted and true latents.
/// Frames where either side is a zero vector contribute zero.
fn latent_cosine(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> f64 {
    let frames = pred.nrows().min(truth.nrows());
    if frames == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for f in 0..frames {
        let p = pred.row(f);
        let t = truth.row(f);
        let np = p.dot(&p).sqrt();
        let nt = t.dot(&t).sqrt();
        if np > 0.0 && nt > 0.0 {
            total += p.dot(&t) / (np * nt);
        }
    }
    total / frames as f64
}

/// Average the per-frame score rows of one clip into a single row.
fn mean_rows(scores: &Array2<f64>) -> ndarray::Array1<f64> {
    scores.mean_axis(Axis(0)).expect("at least one frame row")
}

struct SubjectScores {
    video: Array2<f64>,
    frame: Array2<f64>,
}

/// Build `[n_test, classes]` score matrices for one subject under the
/// configured classifier.
fn classifier_scores(
    cfg: &ExperimentConfig,
    subject: usize,
    labels_test: &[usize],
    gt_train: &[Array4<f64>],
    labels_train: &[usize],
    recon_videos: &[&Array4<f64>],
) -> Result<SubjectScores> {
    let classes = cfg.data.concepts;
    let m = &cfg.metrics;
    match m.classifier {
        ClassifierKind::Oracle => {
            let s = oracle_scores(labels_test, classes);
            Ok(SubjectScores {
                video: s.clone(),
                frame: s,
            })
        }
        ClassifierKind::CalibratedRandom => {
            let n = labels_test.len();
            let sv = calibrated_random_scores(
                n,
                classes,
                derive_seed(cfg.run.seed, &format!("eval_video_s{subject}")),
            );
            let sf = calibrated_random_scores(
                n,
                classes,
                derive_seed(cfg.run.seed, &format!("eval_frame_s{subject}")),
            );
            Ok(SubjectScores { video: sv, frame: sf })
        }
        ClassifierKind::Trainable => {
            let n_train = gt_train.len();
            if n_train == 0 {
                return Err(Error::Validation(
                    "trainable classifier needs a non-empty train split".into(),
                ));
            }
            let dim = {
                let (_, h, w, c) = gt_train[0].dim();
                h * w * c
            };
            // whole-clip classifier on pooled video features
            let mut xv = Array2::zeros((n_train, 2 * dim));
            for (i, v) in gt_train.iter().enumerate() {
                xv.row_mut(i).assign(&video_features(v.view()));
            }
            let seed = derive_seed(cfg.run.seed, &format!("classifier_s{subject}"));
            let clf_v = LogisticClassifier::train(
                xv.view(),
                labels_train,
                classes,
                m.classifier_epochs,
                m.classifier_lr,
                seed,
            )?;
            let mut qv = Array2::zeros((recon_videos.len(), 2 * dim));
            for (i, v) in recon_videos.iter().enumerate() {
                qv.row_mut(i).assign(&video_features(v.view()));
            }
            let video = clf_v.scores(qv.view())?;

            // frame classifier on raw frames, one label per frame
            let frames = cfg.data.frames;
            let mut xf = Array2::zeros((n_train * frames, dim));
            let mut frame_labels = Vec::with_capacity(n_train * frames);
            for (i, v) in gt_train.iter().enumerate() {
                let rows = frame_feature_rows(v.view());
                for f in 0..frames {
                    xf.row_mut(i * frames + f).assign(&rows.row(f));
                    frame_labels.push(labels_train[i]);
                }
            }
            let clf_f = LogisticClassifier::train(
                xf.view(),
                &frame_labels,
                classes,
                m.classifier_epochs,
                m.classifier_lr,
                seed,
            )?;
            let mut frame = Array2::zeros((recon_videos.len(), classes));
            for (i, v) in recon_videos.iter().enumerate() {
                let rows = frame_feature_rows(v.view());
                let logits = clf_f.scores(rows.view())?;
                frame.row_mut(i).assign(&mean_rows(&logits));
            }
            Ok(SubjectScores { video, frame })
        }
    }
}

/// Score every subject's reconstructions and assemble the metrics report.
///
/// Each element of `pairs` is one subject's dataset and its reconstruction
/// set; both must carry the hash of `cfg`. With a single subject the
/// summary averages over clips; with several it averages subject means.
pub fn evaluate(
    cfg: &ExperimentConfig,
    pairs: &[(&Dataset, &ReconstructionSet)],
) -> Result<MetricsReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("no subjects to evaluate".into()));
    }
    let gen_hash = cfg.stage_hash(Stage::Gen);
    let recon_hash = cfg.stage_hash(Stage::Reconstruct);
    for (ds, recon) in pairs {
        if ds.config_hash != gen_hash {
            return Err(Error::Validation(format!(
                "dataset was generated from config {} but evaluating {}",
                &ds.config_hash[..12],
                &gen_hash[..12]
            )));
        }
        if recon.config_hash != recon_hash {
            return Err(Error::Validation(format!(
                "reconstruction came from config {} but evaluating {}",
                &recon.config_hash[..12],
                &recon_hash[..12]
            )));
        }
    }
    let renderer = Renderer::new(
        cfg.data.latent_dim,
        cfg.render.height,
        cfg.render.width,
    )?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();

    for (ds, recon) in pairs {
        let subject = ds.clips.first().map_or(0, |c| c.record.subject);
        let (train_idx, test_idx) = ds.split_indices();
        let by_id: BTreeMap<&str, usize> = ds
            .clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.record.clip_id.as_str(), i))
            .collect();

        // pair each reconstruction with its ground-truth clip
        let mut paired: Vec<(usize, &crate::inference::ReconstructedClip)> = Vec::new();
        let mut seen = Vec::new();
        for clip in &recon.clips {
            match by_id.get(clip.record.clip_id.as_str()) {
                Some(&i) => {
                    paired.push((i, clip));
                    seen.push(i);
                }
                None => missing.push(format!("s{subject}/{}", clip.record.clip_id)),
            }
        }
        // ground-truth test clips nothing was reconstructed for
        for i in test_idx {
            if !seen.contains(&i) {
                missing.push(format!("s{subject}/{}", ds.clips[i].record.clip_id));
            }
        }
        if paired.is_empty() {
            continue;
        }

        let labels_test: Vec<usize> = paired.iter().map(|(i, _)| ds.clips[*i].record.concept).collect();
        let labels_train: Vec<usize> = train_idx
            .iter()
            .map(|&i| ds.clips[i].record.concept)
            .collect();
        let gt_train = render_ground_truth(&renderer, ds, &train_idx)?;
        let recon_videos: Vec<&Array4<f64>> = paired.iter().map(|(_, c)| &c.video).collect();
        let scores = classifier_scores(
            cfg,
            subject,
            &labels_test,
            &gt_train,
            &labels_train,
            &recon_videos,
        )?;

        let m = &cfg.metrics;
        let classes = cfg.data.concepts;
        let run = |tag: &str, s: &Array2<f64>, n_way: usize, top_k: usize| {
            nway_topk(
                s.view(),
                &labels_test,
                n_way,
                top_k,
                m.nway_repeats,
                derive_seed(cfg.run.seed, &format!("{tag}_s{subject}")),
            )
        };
        let two_v = run("2way_v", &scores.video, 2, 1)?;
        let n_v = run("nway_v", &scores.video, classes, m.top_k)?;
        let two_f = run("2way_f", &scores.frame, 2, 1)?;
        let n_f = run("nway_f", &scores.frame, classes, m.top_k)?;

        for (q, (i, clip)) in paired.iter().enumerate() {
            let gt = render_ground_truth(&renderer, ds, &[*i])?.remove(0);
            let ssim = ssim_video(clip.video.view(), gt.view(), m.ssim_mode)?;
            let psnr = psnr_video(clip.video.view(), gt.view())?;
            let hue = hue_pcc_video(clip.video.view(), gt.view(), m.achromatic_threshold)?;
            let cosine = latent_cosine(clip.perceptual.view(), ds.clips[*i].latent.view());
            let mut values = BTreeMap::new();
            values.insert("2way_v".into(), MetricValue(two_v.per_query[q]));
            values.insert("nway_v".into(), MetricValue(n_v.per_query[q]));
            values.insert("2way_f".into(), MetricValue(two_f.per_query[q]));
            values.insert("nway_f".into(), MetricValue(n_f.per_query[q]));
            values.insert("ssim".into(), MetricValue(ssim));
            values.insert("psnr".into(), MetricValue(psnr));
            values.insert("hue_pcc".into(), MetricValue(hue));
            values.insert("latent_cosine".into(), MetricValue(cosine));
            rows.push(ClipMetrics {
                clip_id: clip.record.clip_id.clone(),
                subject: clip.record.subject,
                concept: clip.record.concept,
                block: clip.record.block,
                values,
            });
        }
    }

    if rows.is_empty() {
        return Err(Error::Validation(
            "no reconstruction could be paired with ground truth".into(),
        ));
    }

    let mut caps = BTreeMap::new();
    caps.insert("psnr".to_string(), cfg.metrics.psnr_cap_db);
    let multi_subject = pairs.len() > 1;
    let summary = if multi_subject {
        summarize_by_subject(&rows, &caps)
    } else {
        summarize(&rows, &caps)
    };
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        revision: crate::revision(),
        seed: cfg.run.seed,
        aggregation: if multi_subject {
            "clip_then_subject".to_string()
        } else {
            "clips".to_string()
        },
        missing,
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClassifierKind, ExperimentConfig};
    use crate::dataset::generate_synthetic;
    use crate::inference::ReconstructedClip;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(concepts: usize, clips_per_block: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.channels = 4;
        cfg.data.samples = 24;
        cfg.data.frames = 3;
        cfg.data.window = 12;
        cfg.data.concepts = concepts;
        cfg.data.blocks = 2;
        cfg.data.clips_per_block = clips_per_block;
        cfg.data.latent_dim = 3;
        cfg.data.joint_dim = 6;
        cfg.data.cond_tokens = 2;
        cfg.data.cond_dim = 3;
        cfg.data.noise_eeg = 0.0;
        cfg.data.noise_emb = 0.0;
        cfg.render.height = 11;
        cfg.render.width = 11;
        cfg.metrics.nway_repeats = 50;
        cfg.metrics.classifier = ClassifierKind::Oracle;
        cfg
    }

    /// Reconstruction set whose videos are exact ground-truth renders and
    /// whose latent predictions are the true latents.
    fn perfect_recon(cfg: &ExperimentConfig, ds: &Dataset) -> ReconstructionSet {
        let renderer = Renderer::new(
            cfg.data.latent_dim,
            cfg.render.height,
            cfg.render.width,
        )
        .unwrap();
        let (_, test_idx) = ds.split_indices();
        let clips = test_idx
            .iter()
            .map(|&i| {
                let c = &ds.clips[i];
                ReconstructedClip {
                    record: c.record.clone(),
                    semantic_cond: Array1::zeros(cfg.data.cond_dim),
                    perceptual: c.latent.clone(),
                    diffused: c.latent.clone(),
                    video: renderer.render_video(c.latent.view()).unwrap(),
                }
            })
            .collect();
        ReconstructionSet {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.stage_hash(Stage::Reconstruct),
            revision: crate::revision(),
            seed: cfg.run.seed,
            clips,
        }
    }

    #[test]
    fn perfect_reconstructions_hit_the_ceiling() {
        let cfg = tiny_cfg(2, 4);
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let recon = perfect_recon(&cfg, &ds);
        let report = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.missing.is_empty());
        assert_eq!(report.aggregation, "clips");
        for row in &report.rows {
            assert_eq!(row.values["ssim"].0, 1.0);
            assert_eq!(row.values["psnr"].0, f64::INFINITY);
            assert!((row.values["hue_pcc"].0 - 1.0).abs() < 1e-9);
            assert_eq!(row.values["2way_v"].0, 1.0);
            assert_eq!(row.values["nway_v"].0, 1.0);
            assert_eq!(row.values["2way_f"].0, 1.0);
            assert_eq!(row.values["nway_f"].0, 1.0);
            assert!((row.values["latent_cosine"].0 - 1.0).abs() < 1e-12);
        }
        // summary caps the infinite PSNR rows
        assert_eq!(report.summary["psnr"].mean, cfg.metrics.psnr_cap_db);
        assert_eq!(report.summary["ssim"].mean, 1.0);
    }

    #[test]
    fn random_reconstructions_sit_near_chance() {
        let mut cfg = tiny_cfg(4, 40);
        cfg.metrics.classifier = ClassifierKind::CalibratedRandom;
        cfg.metrics.nway_repeats = 200;
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let mut recon = perfect_recon(&cfg, &ds);
        // overwrite videos with seeded noise so pixel metrics stay defined
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for clip in &mut recon.clips {
            clip.video.mapv_inplace(|_| rng.gen::<f64>());
        }
        let report = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        let two = report.summary["2way_v"].mean;
        let four = report.summary["nway_v"].mean;
        // 40 test clips; loose Monte-Carlo bands around 1/2 and 1/4
        assert!((two - 0.5).abs() < 0.25, "2way {two}");
        assert!((four - 0.25).abs() < 0.2, "4way {four}");
        assert!(report.summary["ssim"].mean < 0.9);
    }

    #[test]
    fn trainable_classifier_separates_clean_renders() {
        let mut cfg = tiny_cfg(2, 4);
        cfg.metrics.classifier = ClassifierKind::Trainable;
        cfg.metrics.classifier_epochs = 40;
        cfg.metrics.classifier_lr = 0.1;
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let recon = perfect_recon(&cfg, &ds);
        let report = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        assert!(
            report.summary["nway_v"].mean >= 0.75,
            "video classifier should separate two clean concepts, got {}",
            report.summary["nway_v"].mean
        );
        assert!(
            report.summary["nway_f"].mean >= 0.75,
            "frame classifier should separate two clean concepts, got {}",
            report.summary["nway_f"].mean
        );
    }

    #[test]
    fn unpaired_clips_are_listed_not_fatal() {
        let cfg = tiny_cfg(2, 4);
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let mut recon = perfect_recon(&cfg, &ds);
        // drop one reconstruction and mangle another's id
        recon.clips.remove(0);
        recon.clips[0].record.clip_id = "b9_c99_i99".to_string();
        let report = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.missing.len(), 3);
        assert!(report.missing.iter().any(|m| m.contains("b9_c99_i99")));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = tiny_cfg(3, 6);
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let recon = perfect_recon(&cfg, &ds);
        let a = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        let b = evaluate(&cfg, &[(&ds, &recon)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiple_subjects_aggregate_subject_means() {
        let mut cfg = tiny_cfg(2, 4);
        cfg.data.subjects = 2;
        let ds0 = generate_synthetic(&cfg, 0).unwrap();
        let ds1 = generate_synthetic(&cfg, 1).unwrap();
        let r0 = perfect_recon(&cfg, &ds0);
        let r1 = perfect_recon(&cfg, &ds1);
        let report = evaluate(&cfg, &[(&ds0, &r0), (&ds1, &r1)]).unwrap();
        assert_eq!(report.aggregation, "clip_then_subject");
        assert_eq!(report.rows.len(), 8);
        assert_eq!(report.summary["ssim"].count, 2);
        assert_eq!(report.summary["ssim"].mean, 1.0);
        let subjects: std::collections::BTreeSet<usize> =
            report.rows.iter().map(|r| r.subject).collect();
        assert_eq!(subjects.len(), 2);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = tiny_cfg(2, 4);
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let recon = perfect_recon(&cfg, &ds);
        let mut other = cfg.clone();
        other.run.seed = 99;
        let err = evaluate(&other, &[(&ds, &recon)]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
