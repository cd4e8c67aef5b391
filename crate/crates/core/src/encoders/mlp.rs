//! Baseline semantic encoder: flatten the segment, then a GELU MLP.

use super::{init_linear, init_zeros, EncoderBatch, SemanticEncoder};
use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct MlpEncoder {
    channels: usize,
    samples: usize,
    widths: Vec<usize>,
    joint_dim: usize,
    params: ParamGroup,
}

impl MlpEncoder {
    pub fn new(
        channels: usize,
        samples: usize,
        hidden: &[usize],
        joint_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || samples == 0 || joint_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut widths = vec![channels * samples];
        widths.extend_from_slice(hidden);
        widths.push(joint_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlp_encoder"));
        let mut params = ParamGroup::new();
        for i in 0..widths.len() - 1 {
            params.push(format!("w{i}"), init_linear(&mut rng, widths[i], widths[i + 1]));
            params.push(format!("b{i}"), init_zeros(&[widths[i + 1]]));
        }
        Ok(Self {
            channels,
            samples,
            widths,
            joint_dim,
            params,
        })
    }
}

impl SemanticEncoder for MlpEncoder {
    fn params(&self) -> &ParamGroup {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    fn forward_batch(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &EncoderBatch<'_>,
    ) -> Result<Var> {
        let (b, c, t) = batch.eeg.dim();
        if c != self.channels || t != self.samples {
            return Err(Error::shape(
                "mlp encoder input",
                &[self.channels, self.samples],
                &[c, t],
            ));
        }
        let flat = batch
            .eeg
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, c * t]))
            .expect("contiguous input");
        let mut x = g.constant(flat);
        let layers = self.widths.len() - 1;
        for i in 0..layers {
            let y = g.matmul(x, vars[2 * i]);
            x = g.add_bias(y, vars[2 * i + 1]);
            if i + 1 < layers {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn output_shape_and_determinism() {
        let enc = MlpEncoder::new(3, 8, &[10], 5, 42).unwrap();
        let eeg = Array3::from_shape_fn((4, 3, 8), |(i, j, k)| {
            ((i + 1) as f64) * 0.1 + (j as f64) * 0.01 + (k as f64) * 0.001
        });
        let ids: Vec<String> = (0..4).map(|i| format!("b1_c0{i}_i00")).collect();
        let batch = EncoderBatch {
            eeg: eeg.view(),
            clip_ids: &ids,
        };
        let mut g = Graph::new();
        let vars = enc.params().bind(&mut g);
        let out = enc.forward_batch(&mut g, &vars, &batch).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 5]);

        let mut g2 = Graph::new();
        let vars2 = enc.params().bind(&mut g2);
        let out2 = enc.forward_batch(&mut g2, &vars2, &batch).unwrap();
        assert_eq!(g.value(out), g2.value(out2));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let enc = MlpEncoder::new(3, 8, &[10], 5, 42).unwrap();
        let eeg = Array3::zeros((2, 4, 8));
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut g = Graph::new();
        let vars = enc.params().bind(&mut g);
        let err = enc
            .forward_batch(&mut g, &vars, &EncoderBatch { eeg: eeg.view(), clip_ids: &ids })
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn seeds_differentiate_weights() {
        let a = MlpEncoder::new(3, 8, &[10], 5, 1).unwrap();
        let b = MlpEncoder::new(3, 8, &[10], 5, 2).unwrap();
        assert_ne!(a.params().get("w0"), b.params().get("w0"));
    }
}
