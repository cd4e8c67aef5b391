//! Dataset model: clip records, in-memory arrays, split logic, and disk IO.
//!
//! A dataset is one synthetic subject's worth of clips. Each clip pairs an
//! EEG segment with the ground truth used for supervision and scoring:
//! per-frame video latents, one embedding per auxiliary modality, and a
//! clean text-condition matrix. Blocks are numbered from 1; the last block
//! is always the held-out test split.

pub mod io;
pub mod synth;
pub mod windows;

pub use io::{load_dataset, save_dataset};
pub use synth::generate_synthetic;

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Identity and placement of one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Stable id, `b{block}_c{concept:02}_i{index:02}`.
    pub clip_id: String,
    /// Concept label, 0-based.
    pub concept: usize,
    /// Session block, 1-based.
    pub block: usize,
    /// Position among this concept's clips within the block, 0-based.
    pub index: usize,
    /// Subject the clip belongs to, 0-based.
    pub subject: usize,
}

impl ClipRecord {
    #[must_use]
    pub fn make_id(block: usize, concept: usize, index: usize) -> String {
        format!("b{block}_c{concept:02}_i{index:02}")
    }
}

/// Raw EEG for one clip, `[channels, samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSegment {
    pub data: Array2<f64>,
}

impl EegSegment {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Validation("empty EEG segment".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("EEG segment has non-finite samples".into()));
        }
        Ok(Self { data })
    }

    #[must_use]
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    #[must_use]
    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    /// Cut into per-frame windows, `[frames, channels, window]`.
    pub fn windows(&self, frames: usize, window: usize) -> Result<ndarray::Array3<f64>> {
        windows::slice_windows(self.data.view(), frames, window)
    }
}

/// One clip's windowed EEG, `[frames, channels, window]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSegment {
    pub data: ndarray::Array3<f64>,
}

/// Shape card for a dataset; every array is checked against it on load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDims {
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: u32,
    pub frames: usize,
    pub window: usize,
    pub concepts: usize,
    pub blocks: usize,
    pub clips_per_block: usize,
    pub latent_dim: usize,
    pub joint_dim: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
}

impl From<&crate::config::DataConfig> for ManifestDims {
    fn from(d: &crate::config::DataConfig) -> Self {
        Self {
            channels: d.channels,
            samples: d.samples,
            sample_rate_hz: d.sample_rate_hz,
            frames: d.frames,
            window: d.window,
            concepts: d.concepts,
            blocks: d.blocks,
            clips_per_block: d.clips_per_block,
            latent_dim: d.latent_dim,
            joint_dim: d.joint_dim,
            cond_tokens: d.cond_tokens,
            cond_dim: d.cond_dim,
        }
    }
}

/// Train/test membership of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAssignment {
    Train,
    Test,
}

/// All arrays for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipData {
    pub record: ClipRecord,
    pub eeg: EegSegment,
    /// Ground-truth per-frame video latents, `[frames, latent_dim]`.
    pub latent: Array2<f64>,
    /// Image-modality embedding in the joint space.
    pub image_emb: Array1<f64>,
    /// Text-modality embedding in the joint space.
    pub text_emb: Array1<f64>,
    /// Depth-modality embedding in the joint space.
    pub depth_emb: Array1<f64>,
    /// Clean conditioning matrix, `[cond_tokens, cond_dim]`.
    pub text_cond: Array2<f64>,
}

/// Serialized manifest: dims, records, and provenance of the generator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dims: ManifestDims,
    pub records: Vec<ClipRecord>,
    /// Seed the generator ran with.
    pub seed: u64,
    /// Hash of the config the generator ran with.
    pub config_hash: String,
    /// Code revision string, informational only.
    pub revision: String,
}

/// One subject's dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dims: ManifestDims,
    pub clips: Vec<ClipData>,
    pub seed: u64,
    pub config_hash: String,
}

impl Dataset {
    /// Block membership: the last block is the test split.
    #[must_use]
    pub fn assignment(&self, block: usize) -> SplitAssignment {
        if block == self.dims.blocks {
            SplitAssignment::Test
        } else {
            SplitAssignment::Train
        }
    }

    /// Clip indices of the train and test splits, in stored order.
    #[must_use]
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, c) in self.clips.iter().enumerate() {
            match self.assignment(c.record.block) {
                SplitAssignment::Train => train.push(i),
                SplitAssignment::Test => test.push(i),
            }
        }
        (train, test)
    }

    /// Train indices with one block held out, plus that block's indices.
    /// Used for epoch selection.
    pub fn split_with_val(&self, val_block: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
        let (train, _) = self.split_indices();
        let Some(vb) = val_block else {
            return Ok((train, Vec::new()));
        };
        if vb == 0 || vb >= self.dims.blocks {
            return Err(Error::Config(format!(
                "val_block must be a train block in 1..={}, got {vb}",
                self.dims.blocks - 1
            )));
        }
        let (fit, val): (Vec<usize>, Vec<usize>) = train
            .into_iter()
            .partition(|&i| self.clips[i].record.block != vb);
        Ok((fit, val))
    }

    /// Block used for epoch selection, honoring config overrides.
    ///
    /// Auto selection takes the last train block; with only one train block
    /// there is nothing to hold out, so auto selection turns itself off.
    /// An explicit block is honored as given.
    #[must_use]
    pub fn resolve_val_block(
        &self,
        epoch_select: bool,
        explicit: Option<usize>,
    ) -> Option<usize> {
        if !epoch_select {
            return None;
        }
        match explicit {
            Some(vb) => Some(vb),
            None if self.dims.blocks >= 3 => Some(self.dims.blocks - 1),
            None => None,
        }
    }

    pub fn clip_by_id(&self, clip_id: &str) -> Result<&ClipData> {
        self.clips
            .iter()
            .find(|c| c.record.clip_id == clip_id)
            .ok_or_else(|| Error::Lookup(format!("no clip with id {clip_id}")))
    }

    /// Full structural check: shapes, finiteness, id uniqueness, ranges.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let expected = d.blocks * d.clips_per_block;
        if self.clips.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} clips ({} blocks x {}), found {}",
                d.blocks,
                d.clips_per_block,
                self.clips.len()
            )));
        }
        windows::window_stride(d.samples, d.frames, d.window)?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.clips {
            let r = &c.record;
            if r.concept >= d.concepts {
                return Err(Error::Validation(format!(
                    "clip {}: concept {} out of range 0..{}",
                    r.clip_id, r.concept, d.concepts
                )));
            }
            if r.block == 0 || r.block > d.blocks {
                return Err(Error::Validation(format!(
                    "clip {}: block {} out of range 1..={}",
                    r.clip_id, r.block, d.blocks
                )));
            }
            if !seen.insert((r.subject, r.clip_id.clone())) {
                return Err(Error::Validation(format!("duplicate clip id {}", r.clip_id)));
            }
            if r.clip_id != ClipRecord::make_id(r.block, r.concept, r.index) {
                return Err(Error::Validation(format!(
                    "clip id {} does not match its record (block {}, concept {}, index {})",
                    r.clip_id, r.block, r.concept, r.index
                )));
            }
            check_shape(&r.clip_id, "eeg", c.eeg.data.shape(), &[d.channels, d.samples])?;
            check_shape(&r.clip_id, "latent", c.latent.shape(), &[d.frames, d.latent_dim])?;
            check_shape(&r.clip_id, "image_emb", c.image_emb.shape(), &[d.joint_dim])?;
            check_shape(&r.clip_id, "text_emb", c.text_emb.shape(), &[d.joint_dim])?;
            check_shape(&r.clip_id, "depth_emb", c.depth_emb.shape(), &[d.joint_dim])?;
            check_shape(
                &r.clip_id,
                "text_cond",
                c.text_cond.shape(),
                &[d.cond_tokens, d.cond_dim],
            )?;
            let finite = c.eeg.data.iter().all(|v| v.is_finite())
                && c.latent.iter().all(|v| v.is_finite())
                && c.image_emb.iter().all(|v| v.is_finite())
                && c.text_emb.iter().all(|v| v.is_finite())
                && c.depth_emb.iter().all(|v| v.is_finite())
                && c.text_cond.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!(
                    "clip {}: non-finite values",
                    r.clip_id
                )));
            }
        }
        Ok(())
    }

    #[must_use]
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            schema_version: crate::container::SCHEMA_VERSION,
            dims: self.dims.clone(),
            records: self.clips.iter().map(|c| c.record.clone()).collect(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            revision: crate::revision(),
        }
    }
}

fn check_shape(clip: &str, what: &str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(Error::shape(format!("clip {clip}: {what}"), expected, actual));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_id_format() {
        assert_eq!(ClipRecord::make_id(3, 7, 0), "b3_c07_i00");
        assert_eq!(ClipRecord::make_id(1, 39, 12), "b1_c39_i12");
    }

    #[test]
    fn last_block_is_test() {
        let cfg = crate::config::ExperimentConfig::default();
        let mut small = cfg.clone();
        small.data.channels = 4;
        small.data.samples = 16;
        small.data.frames = 2;
        small.data.window = 12;
        small.data.concepts = 2;
        small.data.blocks = 3;
        small.data.clips_per_block = 2;
        small.data.latent_dim = 3;
        small.data.joint_dim = 5;
        small.data.cond_tokens = 2;
        small.data.cond_dim = 3;
        let ds = synth::generate_synthetic(&small, 0).unwrap();
        let (train, test) = ds.split_indices();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        for i in test {
            assert_eq!(ds.clips[i].record.block, 3);
        }
        let (fit, val) = ds.split_with_val(Some(2)).unwrap();
        assert_eq!(fit.len(), 2);
        assert_eq!(val.len(), 2);
        for i in val {
            assert_eq!(ds.clips[i].record.block, 2);
        }
        assert!(ds.split_with_val(Some(3)).is_err());
    }
}
