//! Concept classifiers producing score matrices for identification.
//!
//! Three strengths: an oracle that reads the label (ceiling), a seeded
//! random scorer (chance floor), and a trainable multinomial logistic
//! regression. Videos are summarized as per-pixel mean and standard
//! deviation over frames before classification.

use crate::autodiff::optim::{collect_grads, Adam, ParamGroup};
use crate::autodiff::Graph;
use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, ArrayView4, Axis, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores that rank the true class first for every query.
#[must_use]
pub fn oracle_scores(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut s = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        s[[i, l]] = 1.0;
    }
    s
}

/// Uniform random scores from a seeded stream; chance-level by design.
#[must_use]
pub fn calibrated_random_scores(queries: usize, classes: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "calibrated_random"));
    Array2::from_shape_fn((queries, classes), |_| rng.gen::<f64>())
}

/// Per-pixel mean and standard deviation over frames, flattened.
#[must_use]
pub fn video_features(video: ArrayView4<'_, f64>) -> Array1<f64> {
    let (frames, h, w, c) = video.dim();
    let d = h * w * c;
    let mut out = Array1::zeros(2 * d);
    let ff = frames as f64;
    for i in 0..d {
        let (y, rem) = (i / (w * c), i % (w * c));
        let (x, ch) = (rem / c, rem % c);
        let mut mean = 0.0;
        for f in 0..frames {
            mean += video[[f, y, x, ch]];
        }
        mean /= ff;
        let mut var = 0.0;
        for f in 0..frames {
            let dv = video[[f, y, x, ch]] - mean;
            var += dv * dv;
        }
        out[i] = mean;
        out[d + i] = (var / ff).sqrt();
    }
    out
}

/// One feature row per frame: the frame's pixels flattened. Complements
/// [`video_features`] for classifiers that score frames individually.
#[must_use]
pub fn frame_feature_rows(video: ArrayView4<'_, f64>) -> Array2<f64> {
    let (frames, h, w, c) = video.dim();
    let d = h * w * c;
    let mut out = Array2::zeros((frames, d));
    for f in 0..frames {
        for (i, v) in video.index_axis(Axis(0), f).iter().enumerate() {
            out[[f, i]] = *v;
        }
    }
    out
}

/// Multinomial logistic regression trained with full-batch Adam.
pub struct LogisticClassifier {
    params: ParamGroup,
    features: usize,
    classes: usize,
}

impl LogisticClassifier {
    /// Train on `[n, features]` rows with labels in `0..classes`.
    pub fn train(
        features: ArrayView2<'_, f64>,
        labels: &[usize],
        classes: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let (n, f) = features.dim();
        if n == 0 || labels.len() != n {
            return Err(Error::Validation(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} outside 0..{classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite classifier feature".into()));
        }
        let mut params = ParamGroup::new();
        params.push(
            "w",
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[f, classes])),
        );
        params.push("b", ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes])));
        // zero init keeps the start at uniform probabilities; the seed only
        // matters if the architecture grows, but keep it in the signature
        // for stability of the calling convention
        let _ = seed;
        let mut onehot = Array2::zeros((n, classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let x = features.to_owned().into_dyn();
        let y = onehot.into_dyn();
        let mut adam = Adam::new(lr);
        for epoch in 0..epochs {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let xc = g.constant(x.clone());
            let logits = g.matmul(xc, vars[0]);
            let logits = g.add_bias(logits, vars[1]);
            let logp = g.log_softmax_last(logits);
            let oh = g.constant(y.clone());
            let picked = g.mul(oh, logp);
            let total = g.sum_all(picked);
            let loss = g.scale(total, -1.0 / n as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: 0 });
            }
            g.backward(loss);
            let grads = collect_grads(&g, &vars);
            adam.step(&mut [&mut params], &grads);
        }
        Ok(Self {
            params,
            features: f,
            classes,
        })
    }

    /// Class scores (logits) for `[n, features]` rows.
    pub fn scores(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.features {
            return Err(Error::shape(
                "classifier input",
                &[self.features],
                &[features.ncols()],
            ));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let xc = g.constant(features.to_owned().into_dyn());
        let logits = g.matmul(xc, vars[0]);
        let logits = g.add_bias(logits, vars[1]);
        Ok(g.value(logits)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("rank 2 logits"))
    }

    #[must_use]
    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Accuracy of the argmax prediction; ties resolve to the lowest class,
/// which never favors the model.
#[must_use]
pub fn top1_accuracy(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row = scores.index_axis(Axis(0), i);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == l {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}
