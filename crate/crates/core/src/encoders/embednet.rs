//! Window encoder for the perceptual path.
//!
//! Each EEG window passes through a depthwise temporal convolution (every
//! channel gets its own small bank of kernels), an across-channel linear
//! "spatial" convolution, GELU, average pooling along time, and a final
//! linear layer down to the token width. All windows share the same weights,
//! so a batch of windows is processed as one 3-D tensor.

use super::{init_linear, init_zeros};
use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayView3, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct EmbedNet {
    channels: usize,
    window: usize,
    kernel: usize,
    mult: usize,
    spatial: usize,
    pool: usize,
    embed_dim: usize,
    params: ParamGroup,
}

impl EmbedNet {
    pub fn new(
        channels: usize,
        window: usize,
        kernel: usize,
        mult: usize,
        spatial: usize,
        pool: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || window == 0 || mult == 0 || spatial == 0 || embed_dim == 0 {
            return Err(Error::Config("embednet dims must be positive".into()));
        }
        if kernel == 0 || kernel > window {
            return Err(Error::Config(format!(
                "temporal kernel ({kernel}) must be in 1..={window}"
            )));
        }
        let conv_out = window - kernel + 1;
        if pool == 0 || conv_out % pool != 0 {
            return Err(Error::Config(format!(
                "pool ({pool}) must divide the conv output length ({conv_out})"
            )));
        }
        let pooled = conv_out / pool;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "embednet"));
        let mut params = ParamGroup::new();
        let kscale = (1.0 / kernel as f64).sqrt();
        params.push(
            "temporal_k",
            ArrayD::from_shape_fn(IxDyn(&[channels, mult, kernel]), |_| {
                let v: f64 = rng.sample(StandardNormal);
                v * kscale
            }),
        );
        params.push("spatial_w", init_linear(&mut rng, channels * mult, spatial));
        params.push("spatial_b", init_zeros(&[spatial]));
        params.push("head_w", init_linear(&mut rng, spatial * pooled, embed_dim));
        params.push("head_b", init_zeros(&[embed_dim]));
        Ok(Self {
            channels,
            window,
            kernel,
            mult,
            spatial,
            pool,
            embed_dim,
            params,
        })
    }

    #[must_use]
    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    #[must_use]
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Encode a stack of windows `[n, channels, window]` to `[n, embed_dim]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], windows: ArrayView3<'_, f64>) -> Result<Var> {
        let (n, c, w) = windows.dim();
        if c != self.channels || w != self.window {
            return Err(Error::shape(
                "embednet input",
                &[self.channels, self.window],
                &[c, w],
            ));
        }
        let x = g.constant(windows.to_owned().into_dyn());
        self.forward_var(g, vars, x, n)
    }

    /// Same as [`forward`](Self::forward) but over a graph value, so callers
    /// can chain onto earlier nodes.
    pub fn forward_var(&self, g: &mut Graph, vars: &[Var], x: Var, n: usize) -> Result<Var> {
        let conv = g.conv1d_depthwise(x, vars[0]);
        // [n, c*mult, conv_out] -> [n, conv_out, c*mult]
        let xt = g.swap_last2(conv);
        let w3 = g.reshape(vars[1], &[1, self.channels * self.mult, self.spatial]);
        let w3 = g.repeat0(w3, n);
        let mixed = g.bmm(xt, w3);
        let mixed = g.add_bias(mixed, vars[2]);
        let act = g.gelu(mixed);
        // back to [n, spatial, conv_out] so pooling runs along time
        let act = g.swap_last2(act);
        let pooled = g.avgpool_last(act, self.pool);
        let conv_out = self.window - self.kernel + 1;
        let flat = g.reshape(pooled, &[n, self.spatial * conv_out / self.pool]);
        let y = g.matmul(flat, vars[3]);
        Ok(g.add_bias(y, vars[4]))
    }
}
