//! Trainer for the perceptual path.
//!
//! Teacher-forced regression of per-frame latents with Adam over the window
//! embedder and the seq2seq weights. Shuffling, init, and stepping all run
//! off seeds derived from the run seed, so two runs with the same config
//! produce identical weights. Epoch selection mirrors the semantic trainer:
//! one train block held out, best epoch restored.

use super::{perception_loss, CausalSeqModel};
use crate::autodiff::optim::{bind_groups, collect_grads, Adam};
use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, Reduction};
use crate::dataset::Dataset;
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One epoch of per-clip mean loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// Outcome of a perceptual training run.
pub struct PerceptualTraining {
    pub model: CausalSeqModel,
    pub history: Vec<PerceptualEpoch>,
    pub best_epoch: Option<usize>,
    pub val_block: Option<usize>,
}

/// Stack EEG windows and target latents for a batch of clips.
fn gather(ds: &Dataset, idxs: &[usize]) -> Result<(Array4<f64>, Array3<f64>)> {
    let d = &ds.dims;
    let b = idxs.len();
    let mut windows = Array4::zeros((b, d.frames, d.channels, d.window));
    let mut targets = Array3::zeros((b, d.frames, d.latent_dim));
    for (row, &i) in idxs.iter().enumerate() {
        let c = &ds.clips[i];
        let w = c.eeg.windows(d.frames, d.window)?;
        windows.index_axis_mut(ndarray::Axis(0), row).assign(&w);
        targets.index_axis_mut(ndarray::Axis(0), row).assign(&c.latent);
    }
    Ok((windows, targets))
}

fn batch_loss(
    model: &CausalSeqModel,
    windows: &Array4<f64>,
    targets: &Array3<f64>,
    reduction: Reduction,
    train: bool,
) -> Result<(f64, Option<Vec<ndarray::ArrayD<f64>>>)> {
    let mut g = Graph::new();
    let vars = bind_groups(&mut g, &[model.embed.params(), model.params()]);
    let ne = model.embed.params().len();
    let tv = g.constant(targets.clone().into_dyn());
    let pred = model.forward_train(&mut g, &vars[..ne], &vars[ne..], windows, tv)?;
    let loss = perception_loss(&mut g, pred, tv, reduction);
    let value = g.scalar(loss);
    if !train {
        return Ok((value, None));
    }
    g.backward(loss);
    Ok((value, Some(collect_grads(&g, &vars))))
}

fn clip_sum(loss: f64, b: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => loss,
        Reduction::MeanBatch => loss * b as f64,
    }
}

/// Train the seq2seq model on the dataset's train split.
pub fn train_perceptual(cfg: &ExperimentConfig, ds: &Dataset) -> Result<PerceptualTraining> {
    let p = &cfg.perceptual;
    let vb = ds.resolve_val_block(p.epoch_select, p.val_block);
    let (fit, val) = ds.split_with_val(vb)?;
    if fit.is_empty() {
        return Err(Error::Validation(
            "no training clips left after the held-out block".into(),
        ));
    }
    let mut model = CausalSeqModel::new(
        p,
        ds.dims.channels,
        ds.dims.window,
        ds.dims.frames,
        ds.dims.latent_dim,
        derive_seed(cfg.run.seed, "perceptual"),
    )?;
    let seed = derive_seed(cfg.run.seed, "perceptual_train");
    let mut adam = Adam::new(p.lr);

    let mut history = Vec::with_capacity(p.epochs);
    let mut best: Option<(
        f64,
        usize,
        crate::autodiff::optim::ParamGroup,
        crate::autodiff::optim::ParamGroup,
    )> = None;

    for epoch in 0..p.epochs {
        let mut order = fit.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);

        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(p.batch_size).enumerate() {
            let (windows, targets) = gather(ds, chunk)?;
            let (value, grads) = batch_loss(&model, &windows, &targets, p.reduction, true)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            let grads = grads.expect("training pass returns grads");
            let (embed, params) = model.split_mut();
            adam.step(&mut [embed.params_mut(), params], &grads);
            sum += clip_sum(value, chunk.len(), p.reduction);
        }
        let mut stats = PerceptualEpoch {
            epoch,
            loss: sum / fit.len() as f64,
            val_loss: None,
        };

        if !val.is_empty() {
            let mut vsum = 0.0;
            for chunk in val.chunks(p.batch_size) {
                let (windows, targets) = gather(ds, chunk)?;
                let (value, _) = batch_loss(&model, &windows, &targets, p.reduction, false)?;
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, batch: usize::MAX });
                }
                vsum += clip_sum(value, chunk.len(), p.reduction);
            }
            let vloss = vsum / val.len() as f64;
            stats.val_loss = Some(vloss);
            let better = best.as_ref().map_or(true, |(b, ..)| vloss < *b);
            if better {
                best = Some((
                    vloss,
                    epoch,
                    model.embed.params().snapshot(),
                    model.params().snapshot(),
                ));
            }
        }
        log::debug!(
            "perceptual epoch {epoch}: loss {:.6} val {:?}",
            stats.loss,
            stats.val_loss
        );
        history.push(stats);
    }

    let best_epoch = if let Some((_, epoch, emb_snap, seq_snap)) = best {
        model.embed.params_mut().restore(&emb_snap);
        model.params_mut().restore(&seq_snap);
        Some(epoch)
    } else {
        None
    };

    Ok(PerceptualTraining {
        model,
        history,
        best_epoch,
        val_block: vb,
    })
}

/// Predict latents for the given clips, `[len(idxs), frames, latent_dim]`.
/// Uses the model's configured inference mode.
pub fn predict_latents(
    model: &CausalSeqModel,
    ds: &Dataset,
    idxs: &[usize],
    batch_size: usize,
) -> Result<Array3<f64>> {
    let d = &ds.dims;
    let mut out = Array3::zeros((idxs.len(), d.frames, d.latent_dim));
    let mut row = 0;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (windows, _) = gather(ds, chunk)?;
        let mut g = Graph::new();
        let vars = bind_groups(&mut g, &[model.embed.params(), model.params()]);
        let ne = model.embed.params().len();
        let pred = model.forward_infer(&mut g, &vars[..ne], &vars[ne..], &windows)?;
        let vals = g.value(pred);
        for i in 0..chunk.len() {
            for f in 0..d.frames {
                for l in 0..d.latent_dim {
                    out[[row + i, f, l]] = vals[[i, f, l]];
                }
            }
        }
        row += chunk.len();
    }
    Ok(out)
}
