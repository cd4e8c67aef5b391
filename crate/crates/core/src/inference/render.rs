//! Fixed linear latent-to-RGB renderer.
//!
//! The projection is seeded from a build-time constant plus the dimensions,
//! never from the run seed, so a latent renders to the same image in every
//! run and every experiment at the same dims. That is what makes pixel
//! metrics comparable across configs, and what lets ground-truth videos be
//! regenerated at evaluation time without storing them.

use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seed namespace for render maps. Changing it would silently re-render
/// every dataset, so it is part of the stored-artifact contract.
const RENDER_SEED: u64 = 0x52454e44;

/// Minimum image side; pixel metrics use an 11x11 window.
pub const MIN_SIDE: usize = 11;

#[derive(Clone, Debug)]
pub struct Renderer {
    height: usize,
    width: usize,
    latent_dim: usize,
    /// `[h*w*3, latent_dim]`, rows in (h, w, channel) order.
    map: Array2<f64>,
}

impl Renderer {
    pub fn new(latent_dim: usize, height: usize, width: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Config(format!(
                "render size {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        let seed = derive_seed(RENDER_SEED, &format!("{height}x{width}x{latent_dim}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / latent_dim as f64).sqrt();
        let map = Array2::from_shape_fn((height * width * 3, latent_dim), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        });
        Ok(Self {
            height,
            width,
            latent_dim,
            map,
        })
    }

    #[must_use]
    pub fn height(&self) -> usize {
        self.height
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    #[must_use]
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Render one latent to `[h, w, 3]` RGB in `[0, 1]`.
    pub fn render_frame(&self, z: ArrayView1<'_, f64>) -> Result<Array3<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::shape("render latent", &[self.latent_dim], &[z.len()]));
        }
        let flat = self.map.dot(&z);
        let mut out = Array3::zeros((self.height, self.width, 3));
        for h in 0..self.height {
            for w in 0..self.width {
                for c in 0..3 {
                    let v = 0.5 + 0.25 * flat[(h * self.width + w) * 3 + c];
                    out[[h, w, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Render a latent trajectory `[frames, latent]` to `[frames, h, w, 3]`.
    pub fn render_video(&self, latents: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
        let frames = latents.nrows();
        let mut out = Array4::zeros((frames, self.height, self.width, 3));
        for f in 0..frames {
            let frame = self.render_frame(latents.row(f))?;
            out.index_axis_mut(ndarray::Axis(0), f).assign(&frame);
        }
        Ok(out)
    }
}
