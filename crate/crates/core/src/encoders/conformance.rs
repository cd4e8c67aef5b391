//! Mechanical checks of the [`SemanticEncoder`] contract.
//!
//! Any encoder implementation can be run through [`check_semantic_encoder`]
//! on a small synthetic batch. The checks are black-box: output shape and
//! finiteness, bitwise determinism, gradient reachability of every
//! parameter, and per-row locality (row `i` of the output must not depend
//! on row `j != i` of the input).

use super::{EncoderBatch, SemanticEncoder};
use crate::autodiff::optim::collect_grads;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use ndarray::{Array3, ArrayD};

/// What a passing encoder looked like.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConformanceReport {
    pub batch: usize,
    pub joint_dim: usize,
    pub params: usize,
}

fn forward_values(
    enc: &impl SemanticEncoder,
    eeg: &Array3<f64>,
    ids: &[String],
) -> Result<ArrayD<f64>> {
    let mut g = Graph::new();
    let vars = enc.params().bind(&mut g);
    let out = enc.forward_batch(
        &mut g,
        &vars,
        &EncoderBatch {
            eeg: eeg.view(),
            clip_ids: ids,
        },
    )?;
    Ok(g.value(out).clone())
}

/// Run the full contract check on the given batch.
pub fn check_semantic_encoder(
    enc: &impl SemanticEncoder,
    eeg: &Array3<f64>,
    ids: &[String],
) -> Result<ConformanceReport> {
    let b = eeg.dim().0;
    if b < 2 {
        return Err(Error::Validation(
            "conformance needs a batch of at least 2".into(),
        ));
    }
    if ids.len() != b {
        return Err(Error::Validation(format!(
            "ids ({}) and eeg batch ({b}) disagree",
            ids.len()
        )));
    }

    // Shape and finiteness.
    let out = forward_values(enc, eeg, ids)?;
    if out.shape() != [b, enc.joint_dim()] {
        return Err(Error::shape(
            "encoder output",
            &[b, enc.joint_dim()],
            out.shape(),
        ));
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("encoder output has non-finite values".into()));
    }

    // Bitwise determinism.
    let again = forward_values(enc, eeg, ids)?;
    if out != again {
        return Err(Error::Validation(
            "encoder output changed between identical calls".into(),
        ));
    }

    // Every parameter reachable from the loss.
    let mut g = Graph::new();
    let vars = enc.params().bind(&mut g);
    let y = enc.forward_batch(
        &mut g,
        &vars,
        &EncoderBatch {
            eeg: eeg.view(),
            clip_ids: ids,
        },
    )?;
    let sq = g.mul(y, y);
    let loss = g.sum_all(sq);
    g.backward(loss);
    let grads = collect_grads(&g, &vars);
    for (var, grad) in vars.iter().zip(&grads) {
        if g.grad(*var).is_none() {
            let name = enc
                .params()
                .iter()
                .nth(vars.iter().position(|v| v == var).unwrap())
                .map(|e| e.name.clone())
                .unwrap_or_default();
            return Err(Error::Validation(format!(
                "parameter {name} is not reachable from the encoder output"
            )));
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite gradient".into()));
        }
    }

    // Locality: perturbing input row j must leave other output rows bitwise
    // unchanged (encoders that ignore the raw EEG pass trivially).
    let mut perturbed = eeg.clone();
    for v in perturbed.index_axis_mut(ndarray::Axis(0), b - 1).iter_mut() {
        *v += 1.0;
    }
    let out_p = forward_values(enc, &perturbed, ids)?;
    for i in 0..b - 1 {
        let a = out.index_axis(ndarray::Axis(0), i);
        let c = out_p.index_axis(ndarray::Axis(0), i);
        if a != c {
            return Err(Error::Validation(format!(
                "output row {i} changed when only input row {} was perturbed",
                b - 1
            )));
        }
    }

    Ok(ConformanceReport {
        batch: b,
        joint_dim: enc.joint_dim(),
        params: enc.params().len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{MlpEncoder, PretrainedAdapter};
    use ndarray::Array1;
    use std::collections::BTreeMap;

    fn batch(b: usize, c: usize, t: usize) -> (Array3<f64>, Vec<String>) {
        let eeg = Array3::from_shape_fn((b, c, t), |(i, j, k)| {
            ((i * 13 + j * 5 + k) as f64 * 0.21).cos()
        });
        let ids = (0..b).map(|i| format!("b1_c{i:02}_i00")).collect();
        (eeg, ids)
    }

    #[test]
    fn mlp_conforms() {
        let enc = MlpEncoder::new(3, 10, &[8], 6, 5).unwrap();
        let (eeg, ids) = batch(3, 3, 10);
        let report = check_semantic_encoder(&enc, &eeg, &ids).unwrap();
        assert_eq!(report.joint_dim, 6);
        assert_eq!(report.params, 4);
    }

    #[test]
    fn adapter_conforms() {
        let (eeg, ids) = batch(3, 3, 10);
        let mut bank = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            bank.insert(
                id.clone(),
                Array1::from_shape_fn(4, |j| (i * 4 + j) as f64 * 0.1),
            );
        }
        let enc = PretrainedAdapter::new(bank, 6, 5).unwrap();
        let report = check_semantic_encoder(&enc, &eeg, &ids).unwrap();
        assert_eq!(report.params, 2);
    }

    #[test]
    fn tiny_batches_rejected() {
        let enc = MlpEncoder::new(3, 10, &[8], 6, 5).unwrap();
        let (eeg, ids) = batch(3, 3, 10);
        let one = eeg.slice(ndarray::s![0..1, .., ..]).to_owned();
        assert!(check_semantic_encoder(&enc, &one, &ids[..1].to_vec()).is_err());
    }
}
