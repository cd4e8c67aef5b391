//! EEG encoders.
//!
//! Two encoder families live here. Semantic encoders map whole EEG segments
//! to single vectors in the joint embedding space and are swappable behind
//! [`SemanticEncoder`]; the contract is spelled out by the trait docs and
//! enforced mechanically by [`conformance`]. The window encoder
//! ([`embednet::EmbedNet`]) maps each sliding window to one token for the
//! perceptual path and is not swappable.

pub mod adapter;
pub mod conformance;
pub mod embednet;
pub mod mlp;

pub use adapter::PretrainedAdapter;
pub use embednet::EmbedNet;
pub use mlp::MlpEncoder;

use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use ndarray::{ArrayD, ArrayView3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One batch of encoder input. Encoders may consume the raw EEG, the clip
/// ids, or both; the two sides are index-aligned.
pub struct EncoderBatch<'a> {
    /// `[batch, channels, samples]`
    pub eeg: ArrayView3<'a, f64>,
    pub clip_ids: &'a [String],
}

/// A trainable map from EEG segments to joint-space embeddings.
///
/// Contract, checked by [`conformance::check_semantic_encoder`]:
/// - `forward_batch` returns `[batch, joint_dim()]` with finite values;
/// - the same parameters and input produce bitwise identical output;
/// - every parameter in `params()` is reachable from the output;
/// - output row `i` depends only on input row `i`.
///
/// `vars` must be the result of `self.params().bind(g)` on the same graph;
/// parameter order is the insertion order of the group.
pub trait SemanticEncoder {
    fn params(&self) -> &ParamGroup;
    fn params_mut(&mut self) -> &mut ParamGroup;
    fn joint_dim(&self) -> usize;
    fn forward_batch(&self, g: &mut Graph, vars: &[Var], batch: &EncoderBatch<'_>)
        -> Result<Var>;
}

/// Normal init scaled for the layer fan; deterministic given the rng state.
pub(crate) fn init_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let scale = (2.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

pub(crate) fn init_zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
