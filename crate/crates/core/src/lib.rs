//! Desk-scale EEG-to-video decoding framework.
//!
//! The pipeline decodes short EEG segments into video clips in three stages:
//! a semantic path that aligns an EEG embedding with video-derived modality
//! embeddings via soft contrastive learning, a perceptual path that maps
//! windowed EEG to per-frame latents through a causally masked seq2seq model,
//! and a guidance-based sampler that combines both conditions to produce the
//! final latent sequence. A synthetic data harness with known ground truth
//! makes every stage testable end to end, and the metric suite mirrors the
//! usual semantic (N-way top-K) and pixel (SSIM, PSNR, hue correlation)
//! scores.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod perceptual;
pub mod pipeline;
pub mod semantic;

pub use config::ExperimentConfig;
pub use dataset::{ClipRecord, DatasetManifest, EegSegment, WindowedSegment};
pub use embedding::{Embedding, ModalitySpace};
pub use error::{Error, Result};

/// Revision string stamped into artifacts so cached stage outputs can be
/// traced back to the code that produced them.
#[must_use]
pub fn revision() -> String {
    format!("mindcine-{}", env!("CARGO_PKG_VERSION"))
}
