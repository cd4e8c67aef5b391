//! Reconstruction: turn trained semantic and perceptual models into video.
//!
//! A small conditional denoiser refines per-frame latents under
//! classifier-free guidance, combining a mean-pooled semantic condition with
//! the perceptual model's frame predictions. A fixed linear renderer maps
//! latents to RGB so reconstructions are comparable across runs and seeds.

pub mod diffusion;
pub mod render;
pub mod reconstruct;

pub use diffusion::{sample_latents, train_diffusion, DiffusionSamples, DiffusionSchedule, NoisePredictor};
pub use reconstruct::{
    load_reconstruction, pooled_conditions, reconstruct, render_ground_truth, save_reconstruction,
    ReconstructedClip, ReconstructionSet,
};
pub use render::Renderer;

use ndarray::Array1;

/// Combine unconditional and conditional noise estimates.
///
/// Returns `uncond + scale * (cond - uncond)`. A scale of one short-circuits
/// to the conditional estimate, zero to the unconditional one, so those two
/// settings cost a single branch and reproduce their inputs exactly.
#[must_use]
pub fn guided_score(uncond: &Array1<f64>, cond: &Array1<f64>, scale: f64) -> Array1<f64> {
    assert_eq!(
        uncond.len(),
        cond.len(),
        "guidance branches must have equal dims"
    );
    if scale == 1.0 {
        return cond.clone();
    }
    if scale == 0.0 {
        return uncond.clone();
    }
    uncond + &(scale * &(cond - uncond))
}
