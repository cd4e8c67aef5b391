//! Dataset persistence.
//!
//! A dataset directory holds `manifest.json` (records, dims, provenance) and
//! an array table with one entry per array kind, stacked over clips in record
//! order. Arrays are stored as little-endian f32; generation runs in f64 and
//! the cast is deterministic, so saved datasets are byte-identical across
//! runs and platforms.

use super::{ClipData, Dataset, DatasetManifest, EegSegment};
use crate::container::{ArrayTable, SCHEMA_VERSION};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use std::path::Path;

const KIND: &str = "dataset";

fn stack_f64<F>(n: usize, per: &[usize], mut get: F) -> (Vec<usize>, Vec<f32>)
where
    F: FnMut(usize) -> Vec<f64>,
{
    let mut shape = vec![n];
    shape.extend_from_slice(per);
    let mut data = Vec::with_capacity(shape.iter().product());
    for i in 0..n {
        data.extend(get(i).into_iter().map(|v| v as f32));
    }
    (shape, data)
}

/// Write `manifest.json` plus the stacked array table under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = ds.manifest();
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let d = &ds.dims;
    let n = ds.clips.len();
    let mut table = ArrayTable::new();
    let (shape, data) = stack_f64(n, &[d.channels, d.samples], |i| {
        ds.clips[i].eeg.data.iter().copied().collect()
    });
    table.insert("eeg", shape, data)?;
    let (shape, data) = stack_f64(n, &[d.frames, d.latent_dim], |i| {
        ds.clips[i].latent.iter().copied().collect()
    });
    table.insert("latent", shape, data)?;
    let (shape, data) = stack_f64(n, &[d.joint_dim], |i| ds.clips[i].image_emb.to_vec());
    table.insert("image_emb", shape, data)?;
    let (shape, data) = stack_f64(n, &[d.joint_dim], |i| ds.clips[i].text_emb.to_vec());
    table.insert("text_emb", shape, data)?;
    let (shape, data) = stack_f64(n, &[d.joint_dim], |i| ds.clips[i].depth_emb.to_vec());
    table.insert("depth_emb", shape, data)?;
    let (shape, data) = stack_f64(n, &[d.cond_tokens, d.cond_dim], |i| {
        ds.clips[i].text_cond.iter().copied().collect()
    });
    table.insert("text_cond", shape, data)?;
    table.save(dir, KIND)
}

fn unstack_2d(arr: &ArrayD<f32>, i: usize, rows: usize, cols: usize) -> Array2<f64> {
    let view = arr.index_axis(ndarray::Axis(0), i);
    Array2::from_shape_fn((rows, cols), |(r, c)| f64::from(view[IxDyn(&[r, c])]))
}

fn unstack_1d(arr: &ArrayD<f32>, i: usize, len: usize) -> Array1<f64> {
    let view = arr.index_axis(ndarray::Axis(0), i);
    Array1::from_shape_fn(len, |k| f64::from(view[IxDyn(&[k])]))
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Ingestion(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Ingestion(format!("manifest parse: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    let table = ArrayTable::load(dir, KIND)?;
    let d = &manifest.dims;
    let n = manifest.records.len();

    let eeg = table.get_nd("eeg", &[n, d.channels, d.samples])?;
    let latent = table.get_nd("latent", &[n, d.frames, d.latent_dim])?;
    let image = table.get_nd("image_emb", &[n, d.joint_dim])?;
    let text_e = table.get_nd("text_emb", &[n, d.joint_dim])?;
    let depth = table.get_nd("depth_emb", &[n, d.joint_dim])?;
    let cond = table.get_nd("text_cond", &[n, d.cond_tokens, d.cond_dim])?;

    let mut clips = Vec::with_capacity(n);
    for (i, record) in manifest.records.iter().enumerate() {
        clips.push(ClipData {
            record: record.clone(),
            eeg: EegSegment {
                data: unstack_2d(&eeg, i, d.channels, d.samples),
            },
            latent: unstack_2d(&latent, i, d.frames, d.latent_dim),
            image_emb: unstack_1d(&image, i, d.joint_dim),
            text_emb: unstack_1d(&text_e, i, d.joint_dim),
            depth_emb: unstack_1d(&depth, i, d.joint_dim),
            text_cond: unstack_2d(&cond, i, d.cond_tokens, d.cond_dim),
        });
    }
    let ds = Dataset {
        dims: manifest.dims.clone(),
        clips,
        seed: manifest.seed,
        config_hash: manifest.config_hash.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::dataset::synth::generate_synthetic;

    fn small() -> Dataset {
        let mut cfg = ExperimentConfig::default();
        cfg.data.channels = 5;
        cfg.data.samples = 24;
        cfg.data.frames = 3;
        cfg.data.window = 12;
        cfg.data.concepts = 2;
        cfg.data.blocks = 2;
        cfg.data.clips_per_block = 4;
        cfg.data.latent_dim = 3;
        cfg.data.joint_dim = 6;
        cfg.data.cond_tokens = 2;
        cfg.data.cond_dim = 4;
        generate_synthetic(&cfg, 0).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything_at_f32() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.dims, ds.dims);
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.config_hash, ds.config_hash);
        for (a, b) in ds.clips.iter().zip(&back.clips) {
            assert_eq!(a.record, b.record);
            for (x, y) in a.eeg.data.iter().zip(b.eeg.data.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(f64::from(*x as f32), *y);
            }
        }
    }

    #[test]
    fn second_save_is_byte_identical() {
        let ds = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(d1.path(), &ds).unwrap();
        let back = load_dataset(d1.path()).unwrap();
        save_dataset(d2.path(), &back).unwrap();
        for name in ["manifest.json", "table.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        let a = std::fs::read(d1.path().join("arrays/eeg.f32")).unwrap();
        let b = std::fs::read(d2.path().join("arrays/eeg.f32")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_array_is_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("arrays/latent.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 1, "ingestion failure: {err}");
    }

    #[test]
    fn schema_version_mismatch_is_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert_ne!(text, bumped);
        std::fs::write(&path, bumped).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::SchemaVersion { found: 99, .. }), "{err}");
    }
}
