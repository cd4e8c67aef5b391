//! Trainer for the semantic path.
//!
//! Minimizes projection + lambda * joint + mu * alignment with Adam over the
//! encoder and head parameters. Batch order reshuffles every epoch from a
//! seed derived off the run seed, so runs are reproducible bit for bit.
//! With epoch selection on, the epoch with the lowest held-out loss wins and
//! its parameters are restored at the end.

use super::{semantic_losses, SemanticHead, SemanticLossCfg};
use crate::autodiff::optim::{bind_groups, collect_grads, Adam};
use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, Reduction};
use crate::dataset::Dataset;
use crate::embedding::derive_seed;
use crate::encoders::{EncoderBatch, SemanticEncoder};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loss components averaged per clip for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub projection: f64,
    pub joint: f64,
    pub alignment: f64,
    /// Held-out loss; absent when epoch selection is off.
    pub val_total: Option<f64>,
}

/// Outcome of a training run. The encoder passed in holds the trained
/// weights; the head lives here.
pub struct SemanticTraining {
    pub head: SemanticHead,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept, when selection ran.
    pub best_epoch: Option<usize>,
    pub val_block: Option<usize>,
}

struct BatchArrays {
    eeg: Array3<f64>,
    ids: Vec<String>,
    image: ArrayD<f64>,
    text: ArrayD<f64>,
    depth: ArrayD<f64>,
    cond: ArrayD<f64>,
}

fn gather(ds: &Dataset, idxs: &[usize]) -> BatchArrays {
    let d = &ds.dims;
    let b = idxs.len();
    let mut eeg = Array3::zeros((b, d.channels, d.samples));
    let mut image = ArrayD::zeros(IxDyn(&[b, d.joint_dim]));
    let mut text = ArrayD::zeros(IxDyn(&[b, d.joint_dim]));
    let mut depth = ArrayD::zeros(IxDyn(&[b, d.joint_dim]));
    let mut cond = ArrayD::zeros(IxDyn(&[b, d.cond_tokens, d.cond_dim]));
    let mut ids = Vec::with_capacity(b);
    for (row, &i) in idxs.iter().enumerate() {
        let c = &ds.clips[i];
        eeg.index_axis_mut(ndarray::Axis(0), row).assign(&c.eeg.data);
        for j in 0..d.joint_dim {
            image[[row, j]] = c.image_emb[j];
            text[[row, j]] = c.text_emb[j];
            depth[[row, j]] = c.depth_emb[j];
        }
        for t in 0..d.cond_tokens {
            for j in 0..d.cond_dim {
                cond[[row, t, j]] = c.text_cond[[t, j]];
            }
        }
        ids.push(c.record.clip_id.clone());
    }
    BatchArrays {
        eeg,
        ids,
        image,
        text,
        depth,
        cond,
    }
}

struct BatchLoss {
    total: f64,
    projection: f64,
    joint: f64,
    alignment: f64,
}

fn batch_losses<E: SemanticEncoder + ?Sized>(
    encoder: &E,
    head: &SemanticHead,
    arrays: &BatchArrays,
    cfg: &SemanticLossCfg,
    train: bool,
) -> Result<(BatchLoss, Option<(Vec<ArrayD<f64>>, usize)>)> {
    let mut g = Graph::new();
    let vars = bind_groups(&mut g, &[encoder.params(), head.params()]);
    let n_enc = encoder.params().len();
    let e = encoder.forward_batch(
        &mut g,
        &vars[..n_enc],
        &EncoderBatch {
            eeg: arrays.eeg.view(),
            clip_ids: &arrays.ids,
        },
    )?;
    let img = g.constant(arrays.image.clone());
    let txt = g.constant(arrays.text.clone());
    let dep = g.constant(arrays.depth.clone());
    let cond = g.constant(arrays.cond.clone());
    let parts = semantic_losses(&mut g, head, &vars[n_enc..], e, img, txt, dep, cond, cfg);
    let loss = BatchLoss {
        total: g.scalar(parts.total),
        projection: g.scalar(parts.projection),
        joint: g.scalar(parts.joint),
        alignment: g.scalar(parts.alignment),
    };
    if !train {
        return Ok((loss, None));
    }
    g.backward(parts.total);
    let grads = collect_grads(&g, &vars);
    Ok((loss, Some((grads, n_enc))))
}

/// Per-clip scale factor turning a batch loss into a sum over clips.
fn clip_sum(loss: f64, b: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => loss,
        Reduction::MeanBatch => loss * b as f64,
    }
}

/// Train encoder and head on the dataset's train split.
pub fn train_semantic<E: SemanticEncoder + ?Sized>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    encoder: &mut E,
) -> Result<SemanticTraining> {
    let s = &cfg.semantic;
    if encoder.joint_dim() != ds.dims.joint_dim {
        return Err(Error::Config(format!(
            "encoder joint_dim ({}) does not match the dataset ({})",
            encoder.joint_dim(),
            ds.dims.joint_dim
        )));
    }
    let vb = ds.resolve_val_block(s.epoch_select, s.val_block);
    let (fit, val) = ds.split_with_val(vb)?;
    if fit.is_empty() {
        return Err(Error::Validation(
            "no training clips left after the held-out block".into(),
        ));
    }
    let mut head = SemanticHead::new(
        ds.dims.joint_dim,
        ds.dims.cond_tokens,
        ds.dims.cond_dim,
        s.tau_init,
        s.share_tau,
        s.learn_tau,
        derive_seed(cfg.run.seed, "semantic_head"),
    )?;
    let loss_cfg = SemanticLossCfg::from(s);
    let seed = derive_seed(cfg.run.seed, "semantic_train");
    let mut adam = Adam::new(s.lr);

    let mut history = Vec::with_capacity(s.epochs);
    let mut best: Option<(f64, usize, crate::autodiff::optim::ParamGroup, crate::autodiff::optim::ParamGroup)> =
        None;

    for epoch in 0..s.epochs {
        let mut order = fit.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(s.batch_size).enumerate() {
            let arrays = gather(ds, chunk);
            let (loss, grads) = batch_losses(encoder, &head, &arrays, &loss_cfg, true)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            let (grads, n_enc) = grads.expect("training pass returns grads");
            adam.step(
                &mut [encoder.params_mut(), head.params_mut()],
                &grads,
            );
            let b = chunk.len();
            sums.0 += clip_sum(loss.total, b, s.reduction);
            sums.1 += clip_sum(loss.projection, b, s.reduction);
            sums.2 += clip_sum(loss.joint, b, s.reduction);
            sums.3 += clip_sum(loss.alignment, b, s.reduction);
            debug_assert_eq!(n_enc, encoder.params().len());
        }
        let n = fit.len() as f64;
        let mut stats = EpochStats {
            epoch,
            total: sums.0 / n,
            projection: sums.1 / n,
            joint: sums.2 / n,
            alignment: sums.3 / n,
            val_total: None,
        };

        if !val.is_empty() {
            let mut vsum = 0.0;
            for chunk in val.chunks(s.batch_size) {
                let arrays = gather(ds, chunk);
                let (loss, _) = batch_losses(encoder, &head, &arrays, &loss_cfg, false)?;
                if !loss.total.is_finite() {
                    return Err(Error::Divergence { epoch, batch: usize::MAX });
                }
                vsum += clip_sum(loss.total, chunk.len(), s.reduction);
            }
            let vtotal = vsum / val.len() as f64;
            stats.val_total = Some(vtotal);
            let better = best.as_ref().map_or(true, |(b, ..)| vtotal < *b);
            if better {
                best = Some((
                    vtotal,
                    epoch,
                    encoder.params().snapshot(),
                    head.params().snapshot(),
                ));
            }
        }
        log::debug!(
            "semantic epoch {epoch}: total {:.6} proj {:.6} joint {:.6} align {:.6} val {:?}",
            stats.total,
            stats.projection,
            stats.joint,
            stats.alignment,
            stats.val_total
        );
        history.push(stats);
    }

    let best_epoch = if let Some((_, epoch, enc_snap, head_snap)) = best {
        encoder.params_mut().restore(&enc_snap);
        head.params_mut().restore(&head_snap);
        Some(epoch)
    } else {
        None
    };

    Ok(SemanticTraining {
        head,
        history,
        best_epoch,
        val_block: vb,
    })
}

/// Encode the given clips to joint-space embeddings, `[len(idxs), joint]`.
pub fn embed_clips<E: SemanticEncoder + ?Sized>(
    encoder: &E,
    ds: &Dataset,
    idxs: &[usize],
    batch_size: usize,
) -> Result<Array2<f64>> {
    let j = encoder.joint_dim();
    let mut out = Array2::zeros((idxs.len(), j));
    let mut row = 0;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let arrays = gather(ds, chunk);
        let mut g = Graph::new();
        let vars = encoder.params().bind(&mut g);
        let e = encoder.forward_batch(
            &mut g,
            &vars,
            &EncoderBatch {
                eeg: arrays.eeg.view(),
                clip_ids: &arrays.ids,
            },
        )?;
        let vals = g.value(e);
        for i in 0..chunk.len() {
            for c in 0..j {
                out[[row + i, c]] = vals[[i, c]];
            }
        }
        row += chunk.len();
    }
    Ok(out)
}
