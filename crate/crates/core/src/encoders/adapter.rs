//! Semantic encoder over precomputed per-clip features.
//!
//! Wraps a frozen feature bank (keyed by clip id) with one trainable linear
//! layer into the joint space. Useful when segment features come from some
//! external pretrained model and only the projection is learned here.

use super::{init_linear, init_zeros, EncoderBatch, SemanticEncoder};
use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::container::ArrayTable;
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

const FEATURES_KIND: &str = "features";

pub struct PretrainedAdapter {
    features: BTreeMap<String, Array1<f64>>,
    feat_dim: usize,
    joint_dim: usize,
    params: ParamGroup,
}

impl PretrainedAdapter {
    /// Build from an in-memory feature bank. All features must share one
    /// dimensionality and be finite.
    pub fn new(
        features: BTreeMap<String, Array1<f64>>,
        joint_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let Some(first) = features.values().next() else {
            return Err(Error::Config("adapter needs at least one feature".into()));
        };
        let feat_dim = first.len();
        if feat_dim == 0 || joint_dim == 0 {
            return Err(Error::Config("adapter dims must be positive".into()));
        }
        for (id, f) in &features {
            if f.len() != feat_dim {
                return Err(Error::shape(
                    format!("feature {id}"),
                    &[feat_dim],
                    &[f.len()],
                ));
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("feature {id} has non-finite values")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapter"));
        let mut params = ParamGroup::new();
        params.push("w", init_linear(&mut rng, feat_dim, joint_dim));
        params.push("b", init_zeros(&[joint_dim]));
        Ok(Self {
            features,
            feat_dim,
            joint_dim,
            params,
        })
    }

    /// Load a feature bank saved as an array table with one entry per clip.
    pub fn load_features(dir: &Path) -> Result<BTreeMap<String, Array1<f64>>> {
        let table = ArrayTable::load(dir, FEATURES_KIND)?;
        let mut out = BTreeMap::new();
        for key in table.keys().map(str::to_owned).collect::<Vec<_>>() {
            let entry = table.get(&key).expect("listed key");
            if entry.shape.len() != 1 {
                return Err(Error::Validation(format!(
                    "feature {key} must be rank 1, got shape {:?}",
                    entry.shape
                )));
            }
            let v = Array1::from_iter(entry.data.iter().map(|&x| f64::from(x)));
            out.insert(key, v);
        }
        Ok(out)
    }

    /// Save a feature bank in the format [`load_features`] reads.
    pub fn save_features(dir: &Path, features: &BTreeMap<String, Array1<f64>>) -> Result<()> {
        let mut table = ArrayTable::new();
        for (id, f) in features {
            table.insert(
                id.clone(),
                vec![f.len()],
                f.iter().map(|&v| v as f32).collect(),
            )?;
        }
        table.save(dir, FEATURES_KIND)
    }

    #[must_use]
    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }
}

impl SemanticEncoder for PretrainedAdapter {
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
        let b = batch.clip_ids.len();
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut stacked = ArrayD::zeros(IxDyn(&[b, self.feat_dim]));
        for (i, id) in batch.clip_ids.iter().enumerate() {
            let f = self
                .features
                .get(id)
                .ok_or_else(|| Error::Lookup(format!("no pretrained feature for clip {id}")))?;
            for (j, &v) in f.iter().enumerate() {
                stacked[[i, j]] = v;
            }
        }
        let x = g.constant(stacked);
        let y = g.matmul(x, vars[0]);
        Ok(g.add_bias(y, vars[1]))
    }
}
