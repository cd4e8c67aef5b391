//! Trained-model persistence.
//!
//! A checkpoint directory holds a manifest (role, stage hash, revision,
//! seed) plus every parameter tensor in an array table, stored as f32. To
//! load one, the caller constructs a fresh model from the same config and
//! this module overwrites its parameters, which pins shapes and catches
//! config drift. Values round-trip exactly after the first save, so save,
//! load, save produces identical bytes.

use crate::autodiff::optim::ParamGroup;
use crate::config::{ExperimentConfig, Stage};
use crate::container::{ArrayTable, SCHEMA_VERSION};
use crate::encoders::SemanticEncoder;
use crate::error::{Error, Result};
use crate::perceptual::CausalSeqModel;
use crate::semantic::SemanticHead;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KIND: &str = "checkpoint";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    /// `"semantic"` or `"perceptual"`.
    role: String,
    config_hash: String,
    revision: String,
    seed: u64,
}

fn store_group(table: &mut ArrayTable, prefix: &str, params: &ParamGroup) -> Result<()> {
    for e in params.iter() {
        let data: Vec<f32> = e.value.iter().map(|&v| v as f32).collect();
        table.insert(
            format!("{prefix}.{}", e.name),
            e.value.shape().to_vec(),
            data,
        )?;
    }
    Ok(())
}

fn load_group(table: &ArrayTable, prefix: &str, params: &mut ParamGroup) -> Result<()> {
    for i in 0..params.len() {
        let (name, shape) = {
            let e = params.entry(i);
            (e.name.clone(), e.value.shape().to_vec())
        };
        let arr = table.get_nd(&format!("{prefix}.{name}"), &shape)?;
        *params.value_mut(i) = arr.mapv(f64::from);
    }
    Ok(())
}

fn write_manifest(dir: &Path, role: &str, config_hash: String, seed: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        role: role.to_string(),
        config_hash,
        revision: crate::revision(),
        seed,
    };
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

fn read_manifest(dir: &Path, role: &str, expected_hash: &str) -> Result<()> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    if manifest.role != role {
        return Err(Error::Validation(format!(
            "checkpoint holds a {} model, expected {role}",
            manifest.role
        )));
    }
    if manifest.config_hash != expected_hash {
        return Err(Error::Validation(format!(
            "checkpoint was trained under config {} but loading {}",
            &manifest.config_hash[..12],
            &expected_hash[..12]
        )));
    }
    Ok(())
}

/// Save the semantic encoder and head.
pub fn save_semantic(
    dir: &Path,
    cfg: &ExperimentConfig,
    encoder: &(impl SemanticEncoder + ?Sized),
    head: &SemanticHead,
) -> Result<()> {
    write_manifest(
        dir,
        "semantic",
        cfg.stage_hash(Stage::TrainSemantic),
        cfg.run.seed,
    )?;
    let mut table = ArrayTable::new();
    store_group(&mut table, "encoder", encoder.params())?;
    store_group(&mut table, "head", head.params())?;
    table.save(dir, KIND)
}

/// Fill a freshly built encoder and head with saved parameters.
pub fn load_semantic(
    dir: &Path,
    cfg: &ExperimentConfig,
    encoder: &mut (impl SemanticEncoder + ?Sized),
    head: &mut SemanticHead,
) -> Result<()> {
    read_manifest(dir, "semantic", &cfg.stage_hash(Stage::TrainSemantic))?;
    let table = ArrayTable::load(dir, KIND)?;
    load_group(&table, "encoder", encoder.params_mut())?;
    load_group(&table, "head", head.params_mut())
}

/// Save the perceptual sequence model, window encoder included.
pub fn save_perceptual(dir: &Path, cfg: &ExperimentConfig, model: &CausalSeqModel) -> Result<()> {
    write_manifest(
        dir,
        "perceptual",
        cfg.stage_hash(Stage::TrainPerceptual),
        cfg.run.seed,
    )?;
    let mut table = ArrayTable::new();
    store_group(&mut table, "embed", model.embed.params())?;
    store_group(&mut table, "seq", model.params())?;
    table.save(dir, KIND)
}

/// Fill a freshly built sequence model with saved parameters.
pub fn load_perceptual(
    dir: &Path,
    cfg: &ExperimentConfig,
    model: &mut CausalSeqModel,
) -> Result<()> {
    read_manifest(dir, "perceptual", &cfg.stage_hash(Stage::TrainPerceptual))?;
    let table = ArrayTable::load(dir, KIND)?;
    let (embed, seq) = model.split_mut();
    load_group(&table, "embed", embed.params_mut())?;
    load_group(&table, "seq", seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::MlpEncoder;
    use ndarray::Array3;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.channels = 3;
        cfg.data.samples = 16;
        cfg.data.frames = 2;
        cfg.data.window = 8;
        cfg.data.joint_dim = 4;
        cfg.data.cond_tokens = 2;
        cfg.data.cond_dim = 3;
        cfg.data.latent_dim = 3;
        cfg.semantic.hidden = vec![6];
        cfg.perceptual.embed_dim = 4;
        cfg.perceptual.model_dim = 4;
        cfg.perceptual.heads = 2;
        cfg.perceptual.ffn_dim = 6;
        cfg.perceptual.layers = 1;
        cfg.perceptual.temporal_kernel = 3;
        cfg
    }

    fn fresh_semantic(cfg: &ExperimentConfig, seed: u64) -> (MlpEncoder, SemanticHead) {
        let enc = MlpEncoder::new(
            cfg.data.channels,
            cfg.data.samples,
            &cfg.semantic.hidden,
            cfg.data.joint_dim,
            seed,
        )
        .unwrap();
        let head = SemanticHead::new(
            cfg.data.joint_dim,
            cfg.data.cond_tokens,
            cfg.data.cond_dim,
            cfg.semantic.tau_init,
            cfg.semantic.share_tau,
            cfg.semantic.learn_tau,
            seed,
        )
        .unwrap();
        (enc, head)
    }

    #[test]
    fn semantic_round_trip_restores_parameters() {
        let cfg = tiny_cfg();
        let (enc, head) = fresh_semantic(&cfg, 11);
        let dir = tempfile::tempdir().unwrap();
        save_semantic(dir.path(), &cfg, &enc, &head).unwrap();
        // different init seed, then load: parameters must match to f32
        let (mut enc2, mut head2) = fresh_semantic(&cfg, 99);
        assert_ne!(
            enc.params().entry(0).value.as_slice().unwrap(),
            enc2.params().entry(0).value.as_slice().unwrap()
        );
        load_semantic(dir.path(), &cfg, &mut enc2, &mut head2).unwrap();
        for i in 0..enc.params().len() {
            let orig = &enc.params().entry(i).value;
            let back = &enc2.params().entry(i).value;
            for (a, b) in orig.iter().zip(back.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        for i in 0..head.params().len() {
            let orig = &head.params().entry(i).value;
            let back = &head2.params().entry(i).value;
            for (a, b) in orig.iter().zip(back.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_cfg();
        let (enc, head) = fresh_semantic(&cfg, 3);
        let d1 = tempfile::tempdir().unwrap();
        save_semantic(d1.path(), &cfg, &enc, &head).unwrap();
        let (mut enc2, mut head2) = fresh_semantic(&cfg, 4);
        load_semantic(d1.path(), &cfg, &mut enc2, &mut head2).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_semantic(d2.path(), &cfg, &enc2, &head2).unwrap();
        let read = |d: &Path| {
            let mut files: Vec<(String, Vec<u8>)> = Vec::new();
            let mut stack = vec![d.to_path_buf()];
            while let Some(p) = stack.pop() {
                for entry in std::fs::read_dir(&p).unwrap() {
                    let e = entry.unwrap();
                    if e.path().is_dir() {
                        stack.push(e.path());
                    } else {
                        let rel = e
                            .path()
                            .strip_prefix(d)
                            .unwrap()
                            .to_string_lossy()
                            .into_owned();
                        files.push((rel, std::fs::read(e.path()).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        assert_eq!(read(d1.path()), read(d2.path()));
    }

    #[test]
    fn perceptual_round_trip_preserves_outputs() {
        let cfg = tiny_cfg();
        let mk = |seed| {
            CausalSeqModel::new(
                &cfg.perceptual,
                cfg.data.channels,
                cfg.data.window,
                cfg.data.frames,
                cfg.data.latent_dim,
                seed,
            )
            .unwrap()
        };
        let model = mk(5);
        let dir = tempfile::tempdir().unwrap();
        save_perceptual(dir.path(), &cfg, &model).unwrap();
        let mut other = mk(77);
        load_perceptual(dir.path(), &cfg, &mut other).unwrap();
        // loaded weights differ from originals only by f32 rounding, so
        // check parameters directly rather than forward outputs
        for (group_a, group_b) in [
            (model.embed.params(), other.embed.params()),
            (model.params(), other.params()),
        ] {
            assert_eq!(group_a.len(), group_b.len());
            for i in 0..group_a.len() {
                for (a, b) in group_a
                    .entry(i)
                    .value
                    .iter()
                    .zip(group_b.entry(i).value.iter())
                {
                    assert_eq!(*a as f32, *b as f32);
                }
            }
        }
    }

    #[test]
    fn role_and_config_mismatches_are_rejected() {
        let cfg = tiny_cfg();
        let (enc, head) = fresh_semantic(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        save_semantic(dir.path(), &cfg, &enc, &head).unwrap();
        // wrong role
        let mut model = CausalSeqModel::new(
            &cfg.perceptual,
            cfg.data.channels,
            cfg.data.window,
            cfg.data.frames,
            cfg.data.latent_dim,
            1,
        )
        .unwrap();
        let err = load_perceptual(dir.path(), &cfg, &mut model).unwrap_err();
        assert!(err.to_string().contains("semantic"));
        // wrong config
        let mut other_cfg = cfg.clone();
        other_cfg.semantic.lr = 0.5;
        let (mut e2, mut h2) = fresh_semantic(&other_cfg, 1);
        assert!(load_semantic(dir.path(), &other_cfg, &mut e2, &mut h2).is_err());
    }

    #[test]
    fn shape_drift_is_caught() {
        let cfg = tiny_cfg();
        let (enc, head) = fresh_semantic(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        save_semantic(dir.path(), &cfg, &enc, &head).unwrap();
        // same stage hash is required for shapes to even be compared, so
        // fake drift by corrupting the stored table instead: a config with
        // different hidden widths already fails the hash check above. Here
        // widen the encoder against a hand-edited manifest hash.
        let mut wide_cfg = cfg.clone();
        wide_cfg.semantic.hidden = vec![9];
        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let patched = text.replace(
            &cfg.stage_hash(Stage::TrainSemantic),
            &wide_cfg.stage_hash(Stage::TrainSemantic),
        );
        std::fs::write(&manifest_path, patched).unwrap();
        let (mut e2, mut h2) = fresh_semantic(&wide_cfg, 1);
        let err = load_semantic(dir.path(), &wide_cfg, &mut e2, &mut h2).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn loaded_encoder_reproduces_saved_outputs() {
        // forward outputs from reloaded weights match a forward pass run
        // on the f32-rounded originals
        let cfg = tiny_cfg();
        let (mut enc, head) = fresh_semantic(&cfg, 21);
        let dir = tempfile::tempdir().unwrap();
        save_semantic(dir.path(), &cfg, &enc, &head).unwrap();
        let (mut enc2, mut head2) = fresh_semantic(&cfg, 22);
        load_semantic(dir.path(), &cfg, &mut enc2, &mut head2).unwrap();
        // round the original in place the same way the store does
        for i in 0..enc.params().len() {
            let rounded = enc.params().entry(i).value.mapv(|v| f64::from(v as f32));
            *enc.params_mut().value_mut(i) = rounded;
        }
        let eeg = Array3::from_shape_fn((2, 3, 16), |(b, c, s)| {
            ((b * 31 + c * 7 + s) as f64 * 0.11).sin()
        });
        let ids = vec!["a".to_string(), "b".to_string()];
        let batch = crate::encoders::EncoderBatch {
            eeg: eeg.view(),
            clip_ids: &ids,
        };
        let run = |e: &MlpEncoder| {
            let mut g = crate::autodiff::Graph::new();
            let vars = e.params().bind(&mut g);
            let out = e.forward_batch(&mut g, &vars, &batch).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(&enc), run(&enc2));
    }
}
