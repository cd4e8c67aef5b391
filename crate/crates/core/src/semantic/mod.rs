//! Semantic path: losses that align EEG embeddings with video-derived
//! modality embeddings, the small head that predicts conditioning tokens,
//! and the trainer.
//!
//! The contrastive piece is a soft variant: instead of one-hot targets, the
//! target distribution over the batch comes from the target modality's own
//! similarity structure, so semantically close clips are not pushed apart.
//! Predictions and targets are L2-normalized inside the loss; the projection
//! and alignment terms act on the raw (un-normalized) embeddings.

pub mod train;

pub use train::{embed_clips, train_semantic, EpochStats, SemanticTraining};

use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::config::Reduction;
use crate::embedding::derive_seed;
use crate::encoders::{init_linear, init_zeros};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Options for one contrastive term.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveCfg {
    /// Average the two directions (predictions scoring targets and targets
    /// scoring predictions) instead of the first alone.
    pub bidirectional: bool,
    pub reduction: Reduction,
}

fn batch_of(g: &Graph, v: Var) -> usize {
    g.value(v).shape()[0]
}

/// Soft contrastive loss between `pred` and `target`, both `[batch, dim]`.
///
/// Rows are L2-normalized, similarities are divided by `tau` (a positive
/// rank-0 graph value), the target-target similarities define the soft label
/// rows, and the loss is the cross-entropy of prediction-target rows against
/// those labels. Gradients flow through predictions and `tau`.
pub fn softclip_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    tau: Var,
    cfg: &ContrastiveCfg,
) -> Var {
    let pshape = g.value(pred).shape().to_vec();
    let tshape = g.value(target).shape().to_vec();
    assert_eq!(pshape, tshape, "pred {pshape:?} and target {tshape:?} must match");
    assert_eq!(pshape.len(), 2, "contrastive inputs must be [batch, dim]");
    let b = pshape[0];

    let pn = g.l2norm_last(pred, 1e-12);
    let tn = g.l2norm_last(target, 1e-12);
    let inv_tau = g.recip(tau);

    let tn_t = g.swap_last2(tn);
    let tt = g.matmul(tn, tn_t);
    let tt = g.mul_scalar_var(tt, inv_tau);
    let labels = g.softmax_last(tt);

    let pt = g.matmul(pn, tn_t);
    let pt = g.mul_scalar_var(pt, inv_tau);
    let logq = g.log_softmax_last(pt);
    let ce = g.mul(labels, logq);
    let ce = g.sum_all(ce);
    let mut loss = g.neg(ce);

    if cfg.bidirectional {
        // The label matrix is built from a symmetric similarity, so its rows
        // serve both directions.
        let pn_t = g.swap_last2(pn);
        let tp = g.matmul(tn, pn_t);
        let tp = g.mul_scalar_var(tp, inv_tau);
        let logq2 = g.log_softmax_last(tp);
        let ce2 = g.mul(labels, logq2);
        let ce2 = g.sum_all(ce2);
        let loss2 = g.neg(ce2);
        let sum = g.add(loss, loss2);
        loss = g.scale(sum, 0.5);
    }
    match cfg.reduction {
        Reduction::Sum => loss,
        Reduction::MeanBatch => g.scale(loss, 1.0 / b as f64),
    }
}

/// Squared distance between raw embeddings and the text targets,
/// `sum_i ||e_i - t_i||^2` under the configured reduction.
pub fn projection_loss(g: &mut Graph, e: Var, text: Var, reduction: Reduction) -> Var {
    let b = batch_of(g, e);
    let d = g.sub(e, text);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    match reduction {
        Reduction::Sum => s,
        Reduction::MeanBatch => g.scale(s, 1.0 / b as f64),
    }
}

/// Squared distance between predicted and reference conditioning tokens.
pub fn alignment_loss(g: &mut Graph, pred_cond: Var, cond: Var, reduction: Reduction) -> Var {
    let b = batch_of(g, pred_cond);
    let d = g.sub(pred_cond, cond);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    match reduction {
        Reduction::Sum => s,
        Reduction::MeanBatch => g.scale(s, 1.0 / b as f64),
    }
}

/// Trainable pieces owned by the semantic path besides the encoder: the
/// temperature(s) and the linear conditioning predictor.
pub struct SemanticHead {
    joint_dim: usize,
    cond_tokens: usize,
    cond_dim: usize,
    share_tau: bool,
    learn_tau: bool,
    /// Fixed log-temperature when `learn_tau` is off.
    fixed_log_tau: f64,
    params: ParamGroup,
}

impl SemanticHead {
    pub fn new(
        joint_dim: usize,
        cond_tokens: usize,
        cond_dim: usize,
        tau_init: f64,
        share_tau: bool,
        learn_tau: bool,
        seed: u64,
    ) -> Result<Self> {
        if tau_init <= 0.0 {
            return Err(Error::Config("tau_init must be > 0".into()));
        }
        if joint_dim == 0 || cond_tokens == 0 || cond_dim == 0 {
            return Err(Error::Config("head dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "semantic_head"));
        let mut params = ParamGroup::new();
        let log_tau = tau_init.ln();
        if learn_tau {
            if share_tau {
                params.push("log_tau", ndarray::arr0(log_tau).into_dyn());
            } else {
                for name in ["log_tau_image", "log_tau_text", "log_tau_depth"] {
                    params.push(name, ndarray::arr0(log_tau).into_dyn());
                }
            }
        }
        params.push(
            "align_w",
            init_linear(&mut rng, joint_dim, cond_tokens * cond_dim),
        );
        params.push("align_b", init_zeros(&[cond_tokens * cond_dim]));
        Ok(Self {
            joint_dim,
            cond_tokens,
            cond_dim,
            share_tau,
            learn_tau,
            fixed_log_tau: log_tau,
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

    /// Temperatures for the (image, text, depth) terms as positive rank-0
    /// graph values; learned ones are `exp` of their log parameter.
    pub fn taus(&self, g: &mut Graph, vars: &[Var]) -> [Var; 3] {
        if self.learn_tau {
            if self.share_tau {
                let t = g.exp(vars[0]);
                [t, t, t]
            } else {
                [g.exp(vars[0]), g.exp(vars[1]), g.exp(vars[2])]
            }
        } else {
            let t = g.constant(ndarray::arr0(self.fixed_log_tau.exp()).into_dyn());
            [t, t, t]
        }
    }

    fn align_vars(&self, vars: &[Var]) -> (Var, Var) {
        let off = if self.learn_tau {
            if self.share_tau {
                1
            } else {
                3
            }
        } else {
            0
        };
        (vars[off], vars[off + 1])
    }

    /// Predict conditioning tokens `[batch, cond_tokens, cond_dim]` from
    /// joint-space embeddings `[batch, joint_dim]`.
    pub fn predict_cond(&self, g: &mut Graph, vars: &[Var], e: Var) -> Var {
        let b = batch_of(g, e);
        let (w, bias) = self.align_vars(vars);
        let y = g.matmul(e, w);
        let y = g.add_bias(y, bias);
        g.reshape(y, &[b, self.cond_tokens, self.cond_dim])
    }

    #[must_use]
    pub fn cond_shape(&self) -> (usize, usize) {
        (self.cond_tokens, self.cond_dim)
    }

    #[must_use]
    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }
}

/// Weights for the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct SemanticLossCfg {
    pub alphas: [f64; 3],
    pub lambda: f64,
    pub mu: f64,
    pub bidirectional: bool,
    pub reduction: Reduction,
}

impl From<&crate::config::SemanticConfig> for SemanticLossCfg {
    fn from(s: &crate::config::SemanticConfig) -> Self {
        Self {
            alphas: s.alphas,
            lambda: s.lambda,
            mu: s.mu,
            bidirectional: s.bidirectional,
            reduction: s.reduction,
        }
    }
}

/// The combined objective and its pieces, all on the graph.
pub struct SemanticLossParts {
    pub total: Var,
    pub projection: Var,
    pub joint: Var,
    pub alignment: Var,
}

/// Build projection + lambda * joint + mu * alignment for one batch.
///
/// `e` is the encoder output `[batch, joint_dim]`; `image`/`text`/`depth`
/// are the modality targets; `cond` is the reference conditioning tensor
/// `[batch, cond_tokens, cond_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn semantic_losses(
    g: &mut Graph,
    head: &SemanticHead,
    head_vars: &[Var],
    e: Var,
    image: Var,
    text: Var,
    depth: Var,
    cond: Var,
    cfg: &SemanticLossCfg,
) -> SemanticLossParts {
    let ccfg = ContrastiveCfg {
        bidirectional: cfg.bidirectional,
        reduction: cfg.reduction,
    };
    let taus = head.taus(g, head_vars);
    let mut joint: Option<Var> = None;
    for (k, (target, tau)) in [(image, taus[0]), (text, taus[1]), (depth, taus[2])]
        .into_iter()
        .enumerate()
    {
        if cfg.alphas[k] == 0.0 {
            // A zero weight skips the term entirely, keeping ablated graphs
            // smaller and avoiding 0 * NaN traps.
            continue;
        }
        let term = softclip_loss(g, e, target, tau, &ccfg);
        let term = g.scale(term, cfg.alphas[k]);
        joint = Some(match joint {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let joint = joint.unwrap_or_else(|| g.constant(ndarray::arr0(0.0).into_dyn()));

    let projection = projection_loss(g, e, text, cfg.reduction);
    let pred_cond = head.predict_cond(g, head_vars, e);
    let alignment = alignment_loss(g, pred_cond, cond, cfg.reduction);

    let jw = g.scale(joint, cfg.lambda);
    let aw = g.scale(alignment, cfg.mu);
    let pj = g.add(projection, jw);
    let total = g.add(pj, aw);
    SemanticLossParts {
        total,
        projection,
        joint,
        alignment,
    }
}

/// Convenience: evaluate the soft contrastive loss on plain arrays.
pub fn softclip_value(
    pred: &ndarray::Array2<f64>,
    target: &ndarray::Array2<f64>,
    tau: f64,
    cfg: &ContrastiveCfg,
) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone().into_dyn());
    let t = g.constant(target.clone().into_dyn());
    let tv = g.constant(ndarray::arr0(tau).into_dyn());
    let loss = softclip_loss(&mut g, p, t, tv, cfg);
    g.scalar(loss)
}
