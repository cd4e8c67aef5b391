//! Perceptual path: windowed EEG to per-frame video latents through a
//! causally masked encoder-decoder transformer.
//!
//! The encoder ingests one token per EEG window. The decoder is trained with
//! teacher forcing (a learned start token followed by the shifted target
//! frames) under a strict causal mask, so frame `i` of the output depends on
//! EEG plus target frames strictly before `i`, and on nothing after. Masked
//! attention weights are exact zeros, which keeps that statement an equality
//! of floats rather than an approximation. Inference is autoregressive by
//! default; a one-shot mode feeds the start token at every position instead.

pub mod train;

pub use train::{predict_latents, train_perceptual, PerceptualTraining};

use crate::autodiff::optim::ParamGroup;
use crate::autodiff::{Graph, Var};
use crate::config::{PerceptualConfig, Reduction};
use crate::embedding::derive_seed;
use crate::encoders::{init_linear, init_zeros, EmbedNet};
use crate::error::{Error, Result};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lower-triangular allowed mask: position `i` may attend to `j <= i`.
#[must_use]
pub fn causal_mask(t: usize) -> Array2<bool> {
    Array2::from_shape_fn((t, t), |(i, j)| j <= i)
}

/// Scaled dot-product attention over per-head tensors.
///
/// `q` is `[b, tq, dh]`, `k`/`v` are `[b, tk, dh]`. Scores are scaled by
/// `1/sqrt(dh)`; with a mask, disallowed cells get exactly zero weight.
/// Returns `(output, weights)` with weights `[b, tq, tk]`.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Array2<bool>>,
) -> (Var, Var) {
    let dh = *g.value(q).shape().last().expect("rank 3") as f64;
    let kt = g.swap_last2(k);
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / dh.sqrt());
    let weights = match mask {
        Some(m) => g.masked_softmax_last(scores, m),
        None => g.softmax_last(scores),
    };
    let out = g.bmm(weights, v);
    (out, weights)
}

/// Sinusoidal position table `[t, dim]`.
#[must_use]
pub fn sinusoidal_pe(t: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Mean squared-error style objective: squared error summed per sample over
/// frames and latent dims, then reduced over the batch.
pub fn perception_loss(g: &mut Graph, pred: Var, target: Var, reduction: Reduction) -> Var {
    let b = g.value(pred).shape()[0];
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    match reduction {
        Reduction::Sum => s,
        Reduction::MeanBatch => g.scale(s, 1.0 / b as f64),
    }
}

/// Encoder-decoder seq2seq over EEG window tokens.
pub struct CausalSeqModel {
    pub embed: EmbedNet,
    params: ParamGroup,
    frames: usize,
    latent_dim: usize,
    model_dim: usize,
    heads: usize,
    layers: usize,
    use_pe: bool,
    learned_pe: bool,
    autoregressive: bool,
    qk_norm: bool,
}

fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

impl CausalSeqModel {
    pub fn new(
        p: &PerceptualConfig,
        channels: usize,
        window: usize,
        frames: usize,
        latent_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if p.model_dim % p.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim ({}) must be a multiple of heads ({})",
                p.model_dim, p.heads
            )));
        }
        if frames == 0 || latent_dim == 0 {
            return Err(Error::Config("frames and latent_dim must be positive".into()));
        }
        let embed = EmbedNet::new(
            channels,
            window,
            p.temporal_kernel,
            p.temporal_mult,
            p.spatial_filters,
            p.pool,
            p.embed_dim,
            derive_seed(seed, "embed"),
        )?;
        let dm = p.model_dim;
        let dh = dm / p.heads;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "seq"));
        let mut params = ParamGroup::new();
        params.push("in_w", init_linear(&mut rng, p.embed_dim, dm));
        params.push("in_b", init_zeros(&[dm]));
        if p.use_pe && p.learned_pe {
            params.push("pe", init_linear(&mut rng, frames, dm));
        }
        let push_attn = |params: &mut ParamGroup, rng: &mut ChaCha8Rng, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(format!("{prefix}.{w}"), init_linear(rng, dm, dm));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.push(format!("{prefix}.{b}"), init_zeros(&[dm]));
            }
            if p.qk_norm {
                params.push(format!("{prefix}.qg"), ones(&[dh]));
                params.push(format!("{prefix}.kg"), ones(&[dh]));
            }
        };
        let push_ffn = |params: &mut ParamGroup, rng: &mut ChaCha8Rng, prefix: &str| {
            params.push(format!("{prefix}.w1"), init_linear(rng, dm, p.ffn_dim));
            params.push(format!("{prefix}.b1"), init_zeros(&[p.ffn_dim]));
            params.push(format!("{prefix}.w2"), init_linear(rng, p.ffn_dim, dm));
            params.push(format!("{prefix}.b2"), init_zeros(&[dm]));
        };
        for l in 0..p.layers {
            params.push(format!("enc{l}.ln1_g"), ones(&[dm]));
            push_attn(&mut params, &mut rng, &format!("enc{l}.att"));
            params.push(format!("enc{l}.ln2_g"), ones(&[dm]));
            push_ffn(&mut params, &mut rng, &format!("enc{l}.ffn"));
        }
        params.push("dec_in_w", init_linear(&mut rng, latent_dim, dm));
        params.push("dec_in_b", init_zeros(&[dm]));
        params.push("start", init_linear(&mut rng, 1, latent_dim));
        for l in 0..p.layers {
            params.push(format!("dec{l}.ln1_g"), ones(&[dm]));
            push_attn(&mut params, &mut rng, &format!("dec{l}.self"));
            params.push(format!("dec{l}.ln2_g"), ones(&[dm]));
            push_attn(&mut params, &mut rng, &format!("dec{l}.cross"));
            params.push(format!("dec{l}.ln3_g"), ones(&[dm]));
            push_ffn(&mut params, &mut rng, &format!("dec{l}.ffn"));
        }
        params.push("out_ln_g", ones(&[dm]));
        params.push("out_w", init_linear(&mut rng, dm, latent_dim));
        params.push("out_b", init_zeros(&[latent_dim]));
        Ok(Self {
            embed,
            params,
            frames,
            latent_dim,
            model_dim: dm,
            heads: p.heads,
            layers: p.layers,
            use_pe: p.use_pe,
            learned_pe: p.learned_pe,
            autoregressive: p.autoregressive,
            qk_norm: p.qk_norm,
        })
    }

    #[must_use]
    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    /// Disjoint mutable access to the embedder and the seq2seq parameters,
    /// for optimizers stepping both groups at once.
    pub fn split_mut(&mut self) -> (&mut EmbedNet, &mut ParamGroup) {
        (&mut self.embed, &mut self.params)
    }

    #[must_use]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[must_use]
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    #[must_use]
    pub fn autoregressive(&self) -> bool {
        self.autoregressive
    }

    fn v(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing param {name}"))]
    }

    fn norm(&self, g: &mut Graph, vars: &[Var], x: Var, gain: &str) -> Var {
        let n = g.layernorm_last(x, 1e-6);
        g.mul_bias(n, self.v(vars, gain))
    }

    /// Multi-head attention block; `prefix` picks the parameter set.
    fn mha(
        &self,
        g: &mut Graph,
        vars: &[Var],
        prefix: &str,
        xq: Var,
        xkv: Var,
        mask: Option<&Array2<bool>>,
    ) -> Var {
        let dm = self.model_dim;
        let dh = dm / self.heads;
        let (b, tq) = {
            let s = g.value(xq).shape().to_vec();
            (s[0], s[1])
        };
        let tk = g.value(xkv).shape()[1];
        let proj = |g: &mut Graph, x: Var, t: usize, w: Var, bias: Var| {
            let flat = g.reshape(x, &[b * t, dm]);
            let y = g.matmul(flat, w);
            let y = g.add_bias(y, bias);
            g.reshape(y, &[b, t, dm])
        };
        let wq = self.v(vars, &format!("{prefix}.wq"));
        let bq = self.v(vars, &format!("{prefix}.bq"));
        let wk = self.v(vars, &format!("{prefix}.wk"));
        let bk = self.v(vars, &format!("{prefix}.bk"));
        let wv = self.v(vars, &format!("{prefix}.wv"));
        let bv = self.v(vars, &format!("{prefix}.bv"));
        let q = proj(g, xq, tq, wq, bq);
        let k = proj(g, xkv, tk, wk, bk);
        let vv = proj(g, xkv, tk, wv, bv);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qs = g.slice_last(q, h * dh, (h + 1) * dh);
            let ks = g.slice_last(k, h * dh, (h + 1) * dh);
            let vs = g.slice_last(vv, h * dh, (h + 1) * dh);
            let (qs, ks) = if self.qk_norm {
                let qg = self.v(vars, &format!("{prefix}.qg"));
                let kg = self.v(vars, &format!("{prefix}.kg"));
                let qn = g.layernorm_last(qs, 1e-6);
                let qn = g.mul_bias(qn, qg);
                let kn = g.layernorm_last(ks, 1e-6);
                let kn = g.mul_bias(kn, kg);
                (qn, kn)
            } else {
                (qs, ks)
            };
            let (o, _w) = attention(g, qs, ks, vs, mask);
            heads_out.push(o);
        }
        let cat = g.concat(2, &heads_out);
        let wo = self.v(vars, &format!("{prefix}.wo"));
        let bo = self.v(vars, &format!("{prefix}.bo"));
        let flat = g.reshape(cat, &[b * tq, dm]);
        let y = g.matmul(flat, wo);
        let y = g.add_bias(y, bo);
        g.reshape(y, &[b, tq, dm])
    }

    fn ffn(&self, g: &mut Graph, vars: &[Var], prefix: &str, x: Var) -> Var {
        let (b, t) = {
            let s = g.value(x).shape().to_vec();
            (s[0], s[1])
        };
        let dm = self.model_dim;
        let flat = g.reshape(x, &[b * t, dm]);
        let h = g.matmul(flat, self.v(vars, &format!("{prefix}.w1")));
        let h = g.add_bias(h, self.v(vars, &format!("{prefix}.b1")));
        let h = g.gelu(h);
        let y = g.matmul(h, self.v(vars, &format!("{prefix}.w2")));
        let y = g.add_bias(y, self.v(vars, &format!("{prefix}.b2")));
        g.reshape(y, &[b, t, dm])
    }

    fn add_pe(&self, g: &mut Graph, vars: &[Var], x: Var, t: usize) -> Var {
        if !self.use_pe {
            return x;
        }
        if self.learned_pe {
            let pe = self.v(vars, "pe");
            let sliced = if t == self.frames {
                pe
            } else {
                // prefix of the table for shorter decoder prefixes
                let pt = g.swap_last2(pe);
                let ps = g.slice_last(pt, 0, t);
                g.swap_last2(ps)
            };
            let p3 = g.reshape(sliced, &[1, t, self.model_dim]);
            g.add_bcast0(x, p3)
        } else {
            let table = sinusoidal_pe(t, self.model_dim);
            let p3 = g.constant(table.into_dyn().into_shape_with_order(IxDyn(&[1, t, self.model_dim])).expect("pe shape"));
            g.add_bcast0(x, p3)
        }
    }

    /// Encode EEG windows `[b, frames, channels, window]` into memory tokens
    /// `[b, frames, model_dim]`.
    pub fn encode(&self, g: &mut Graph, embed_vars: &[Var], seq_vars: &[Var], windows: &Array4<f64>) -> Result<Var> {
        let (b, t, c, w) = windows.dim();
        if t != self.frames {
            return Err(Error::shape("encoder windows", &[self.frames], &[t]));
        }
        let flat = windows
            .clone()
            .into_shape_with_order((b * t, c, w))
            .expect("contiguous windows");
        let tokens = self.embed.forward(g, embed_vars, flat.view())?;
        let e = self.embed.embed_dim();
        let flat_w = self.v(seq_vars, "in_w");
        let flat_b = self.v(seq_vars, "in_b");
        let tokens = g.reshape(tokens, &[b * t, e]);
        let x = g.matmul(tokens, flat_w);
        let x = g.add_bias(x, flat_b);
        let mut x = g.reshape(x, &[b, t, self.model_dim]);
        x = self.add_pe(g, seq_vars, x, t);
        for l in 0..self.layers {
            let n = self.norm(g, seq_vars, x, &format!("enc{l}.ln1_g"));
            let a = self.mha(g, seq_vars, &format!("enc{l}.att"), n, n, None);
            x = g.add(x, a);
            let n = self.norm(g, seq_vars, x, &format!("enc{l}.ln2_g"));
            let f = self.ffn(g, seq_vars, &format!("enc{l}.ffn"), n);
            x = g.add(x, f);
        }
        Ok(x)
    }

    /// Run the decoder over `dec_in` `[b, t, latent_dim]` against `memory`.
    fn decode(&self, g: &mut Graph, seq_vars: &[Var], memory: Var, dec_in: Var) -> Var {
        let (b, t) = {
            let s = g.value(dec_in).shape().to_vec();
            (s[0], s[1])
        };
        let mask = causal_mask(t);
        let w = self.v(seq_vars, "dec_in_w");
        let bias = self.v(seq_vars, "dec_in_b");
        let flat = g.reshape(dec_in, &[b * t, self.latent_dim]);
        let x = g.matmul(flat, w);
        let x = g.add_bias(x, bias);
        let mut x = g.reshape(x, &[b, t, self.model_dim]);
        x = self.add_pe(g, seq_vars, x, t);
        for l in 0..self.layers {
            let n = self.norm(g, seq_vars, x, &format!("dec{l}.ln1_g"));
            let a = self.mha(g, seq_vars, &format!("dec{l}.self"), n, n, Some(&mask));
            x = g.add(x, a);
            let n = self.norm(g, seq_vars, x, &format!("dec{l}.ln2_g"));
            let a = self.mha(g, seq_vars, &format!("dec{l}.cross"), n, memory, None);
            x = g.add(x, a);
            let n = self.norm(g, seq_vars, x, &format!("dec{l}.ln3_g"));
            let f = self.ffn(g, seq_vars, &format!("dec{l}.ffn"), n);
            x = g.add(x, f);
        }
        let n = self.norm(g, seq_vars, x, "out_ln_g");
        let flat = g.reshape(n, &[b * t, self.model_dim]);
        let y = g.matmul(flat, self.v(seq_vars, "out_w"));
        let y = g.add_bias(y, self.v(seq_vars, "out_b"));
        g.reshape(y, &[b, t, self.latent_dim])
    }

    fn start_block(&self, g: &mut Graph, seq_vars: &[Var], b: usize) -> Var {
        let start = self.v(seq_vars, "start");
        let s3 = g.reshape(start, &[1, 1, self.latent_dim]);
        g.repeat0(s3, b)
    }

    /// Teacher-forced pass: predict all frames given the true previous
    /// frames, `targets` being `[b, frames, latent_dim]`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        embed_vars: &[Var],
        seq_vars: &[Var],
        windows: &Array4<f64>,
        targets: Var,
    ) -> Result<Var> {
        let memory = self.encode(g, embed_vars, seq_vars, windows)?;
        let b = windows.dim().0;
        let start = self.start_block(g, seq_vars, b);
        let dec_in = if self.frames == 1 {
            start
        } else {
            // drop the last frame: [b, t, l] -> [b, t-1, l]
            let tt = g.swap_last2(targets);
            let cut = g.slice_last(tt, 0, self.frames - 1);
            let shifted = g.swap_last2(cut);
            g.concat(1, &[start, shifted])
        };
        Ok(self.decode(g, seq_vars, memory, dec_in))
    }

    /// Inference pass. Autoregressive mode feeds predictions back in frame
    /// by frame; one-shot mode feeds the start token at every position.
    pub fn forward_infer(
        &self,
        g: &mut Graph,
        embed_vars: &[Var],
        seq_vars: &[Var],
        windows: &Array4<f64>,
    ) -> Result<Var> {
        let memory = self.encode(g, embed_vars, seq_vars, windows)?;
        let b = windows.dim().0;
        let start = self.start_block(g, seq_vars, b);
        if !self.autoregressive {
            let mut dec_in = start;
            if self.frames > 1 {
                let parts: Vec<Var> = (0..self.frames).map(|_| start).collect();
                dec_in = g.concat(1, &parts);
            }
            return Ok(self.decode(g, seq_vars, memory, dec_in));
        }
        let mut produced: Vec<Var> = Vec::with_capacity(self.frames);
        let mut dec_in = start;
        for i in 0..self.frames {
            let out = self.decode(g, seq_vars, memory, dec_in);
            // last position of the prefix output
            let ot = g.swap_last2(out);
            let last = g.slice_last(ot, i, i + 1);
            let last = g.swap_last2(last);
            produced.push(last);
            if i + 1 < self.frames {
                let mut parts = vec![start];
                parts.extend(&produced);
                dec_in = g.concat(1, &parts);
            }
        }
        if produced.len() == 1 {
            Ok(produced[0])
        } else {
            Ok(g.concat(1, &produced))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::optim::bind_groups;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};

    fn small_pcfg() -> PerceptualConfig {
        PerceptualConfig {
            embed_dim: 8,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 12,
            temporal_kernel: 3,
            temporal_mult: 2,
            spatial_filters: 4,
            pool: 2,
            ..PerceptualConfig::default()
        }
    }

    fn model() -> CausalSeqModel {
        CausalSeqModel::new(&small_pcfg(), 3, 8, 4, 5, 17).unwrap()
    }

    fn windows(b: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, 4, 3, 8), |(i, f, c, s)| {
            0.4 * ((i * 97 + f * 31 + c * 11 + s) as f64 * 0.23).sin()
        })
    }

    fn targets(b: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, 4, 5), |(i, f, l)| {
            0.3 * ((i * 7 + f * 3 + l) as f64 * 0.41).cos()
        })
    }

    #[test]
    fn causal_mask_counts() {
        for t in 1..8 {
            let m = causal_mask(t);
            let allowed = m.iter().filter(|&&x| x).count();
            assert_eq!(allowed, t * (t + 1) / 2);
        }
        let m = causal_mask(3);
        assert!(m[[0, 0]] && !m[[0, 1]] && !m[[0, 2]]);
        assert!(m[[2, 0]] && m[[2, 1]] && m[[2, 2]]);
    }

    #[test]
    fn attention_weights_rows_sum_to_one_and_mask_zeroes() {
        let mut g = Graph::new();
        let q = g.constant(ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 3, 2]), |d| {
            (d[1] * 2 + d[2]) as f64 * 0.3
        }));
        let k = g.constant(ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 3, 2]), |d| {
            (d[1] + d[2]) as f64 * 0.5 - 0.4
        }));
        let v = g.constant(ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 3, 2]), |d| {
            d[1] as f64
        }));
        let mask = causal_mask(3);
        let (_, w) = attention(&mut g, q, k, v, Some(&mask));
        let wv = g.value(w);
        for i in 0..3 {
            let mut row = 0.0;
            for j in 0..3 {
                if j > i {
                    assert_eq!(wv[[0, i, j]], 0.0, "masked weight must be exactly zero");
                }
                row += wv[[0, i, j]];
            }
            assert_abs_diff_eq!(row, 1.0, epsilon = 1e-12);
        }
        // First position can only attend to itself.
        assert_eq!(wv[[0, 0, 0]], 1.0);
    }

    #[test]
    fn teacher_forced_outputs_ignore_future_targets() {
        let m = model();
        let w = windows(2);
        let t0 = targets(2);
        let run = |t: &Array3<f64>| {
            let mut g = Graph::new();
            let vars = bind_groups(&mut g, &[m.embed.params(), m.params()]);
            let ne = m.embed.params().len();
            let tv = g.constant(t.clone().into_dyn());
            let out = m
                .forward_train(&mut g, &vars[..ne], &vars[ne..], &w, tv)
                .unwrap();
            g.value(out).clone()
        };
        let base = run(&t0);
        assert_eq!(base.shape(), &[2, 4, 5]);
        // Perturb the last target frame: predictions for frames 0..=2 see
        // only earlier frames, so they must not move at all.
        let mut t1 = t0.clone();
        for v in t1.index_axis_mut(ndarray::Axis(1), 3).iter_mut() {
            *v += 10.0;
        }
        let moved = run(&t1);
        for bi in 0..2 {
            for f in 0..3 {
                for l in 0..5 {
                    assert_eq!(
                        base[[bi, f, l]],
                        moved[[bi, f, l]],
                        "frame {f} changed when only frame 3 moved"
                    );
                }
            }
        }
        // The final frame does depend on frame 2's target via the shift.
        let mut t2 = t0.clone();
        for v in t2.index_axis_mut(ndarray::Axis(1), 2).iter_mut() {
            *v += 10.0;
        }
        let moved2 = run(&t2);
        let mut any = false;
        for bi in 0..2 {
            for l in 0..5 {
                if base[[bi, 3, l]] != moved2[[bi, 3, l]] {
                    any = true;
                }
            }
        }
        assert!(any, "teacher forcing should feed frame 2 into frame 3");
    }

    #[test]
    fn inference_is_deterministic_and_shaped() {
        let m = model();
        let w = windows(2);
        let run = || {
            let mut g = Graph::new();
            let vars = bind_groups(&mut g, &[m.embed.params(), m.params()]);
            let ne = m.embed.params().len();
            let out = m.forward_infer(&mut g, &vars[..ne], &vars[ne..], &w).unwrap();
            g.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[2, 4, 5]);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn one_shot_mode_differs_from_autoregressive() {
        let mut cfg = small_pcfg();
        cfg.autoregressive = false;
        let m2 = CausalSeqModel::new(&cfg, 3, 8, 4, 5, 17).unwrap();
        let m1 = model();
        let w = windows(1);
        let run = |m: &CausalSeqModel| {
            let mut g = Graph::new();
            let vars = bind_groups(&mut g, &[m.embed.params(), m.params()]);
            let ne = m.embed.params().len();
            let out = m.forward_infer(&mut g, &vars[..ne], &vars[ne..], &w).unwrap();
            g.value(out).clone()
        };
        let ar = run(&m1);
        let os = run(&m2);
        // Same weights, same first frame (both feed only the start token
        // there), different later frames.
        assert_abs_diff_eq!(ar[[0, 0, 0]], os[[0, 0, 0]], epsilon = 1e-12);
        assert_ne!(ar, os);
    }

    #[test]
    fn perception_loss_example() {
        // One sample, two frames, three dims, all-ones error: 6.
        let mut g = Graph::new();
        let pred = g.constant(ndarray::ArrayD::from_elem(IxDyn(&[1, 2, 3]), 1.0));
        let target = g.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 2, 3])));
        let loss = perception_loss(&mut g, pred, target, Reduction::MeanBatch);
        assert_abs_diff_eq!(g.scalar(loss), 6.0, epsilon = 1e-15);
        // Two identical samples: the per-sample sum stays 6 under the batch
        // mean, doubles under plain summation.
        let mut g = Graph::new();
        let pred = g.constant(ndarray::ArrayD::from_elem(IxDyn(&[2, 2, 3]), 1.0));
        let target = g.constant(ndarray::ArrayD::zeros(IxDyn(&[2, 2, 3])));
        let mean = perception_loss(&mut g, pred, target, Reduction::MeanBatch);
        assert_abs_diff_eq!(g.scalar(mean), 6.0, epsilon = 1e-15);
        let mut g = Graph::new();
        let pred = g.constant(ndarray::ArrayD::from_elem(IxDyn(&[2, 2, 3]), 1.0));
        let target = g.constant(ndarray::ArrayD::zeros(IxDyn(&[2, 2, 3])));
        let s = perception_loss(&mut g, pred, target, Reduction::Sum);
        assert_abs_diff_eq!(g.scalar(s), 12.0, epsilon = 1e-15);
    }

    #[test]
    fn pe_table_structure() {
        let pe = sinusoidal_pe(4, 6);
        // position 0: sin terms 0, cos terms 1
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_abs_diff_eq!(pe[[0, i]], expect, epsilon = 1e-15);
        }
        // values bounded
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        // disabling pe changes nothing else: two models differing only in
        // use_pe produce different outputs
        let mut cfg = small_pcfg();
        cfg.use_pe = false;
        let m_no = CausalSeqModel::new(&cfg, 3, 8, 4, 5, 17).unwrap();
        let m_yes = model();
        let w = windows(1);
        let run = |m: &CausalSeqModel| {
            let mut g = Graph::new();
            let vars = bind_groups(&mut g, &[m.embed.params(), m.params()]);
            let ne = m.embed.params().len();
            let out = m.forward_infer(&mut g, &vars[..ne], &vars[ne..], &w).unwrap();
            g.value(out).clone()
        };
        assert_ne!(run(&m_no), run(&m_yes));
    }

    #[test]
    fn learned_pe_is_a_parameter() {
        let mut cfg = small_pcfg();
        cfg.learned_pe = true;
        let m = CausalSeqModel::new(&cfg, 3, 8, 4, 5, 17).unwrap();
        assert!(m.params().index_of("pe").is_some());
        let m2 = model();
        assert!(m2.params().index_of("pe").is_none());
    }

    fn grad_model() -> CausalSeqModel {
        let cfg = PerceptualConfig {
            embed_dim: 4,
            model_dim: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 6,
            temporal_kernel: 3,
            temporal_mult: 1,
            spatial_filters: 2,
            pool: 2,
            ..PerceptualConfig::default()
        };
        CausalSeqModel::new(&cfg, 2, 6, 2, 3, 23).unwrap()
    }

    // Loss under given parameter sets; the throwaway model only supplies the
    // architecture, its own weights are never bound.
    fn grad_loss(
        embed: &crate::autodiff::optim::ParamGroup,
        seq: &crate::autodiff::optim::ParamGroup,
        w: &Array4<f64>,
        t: &Array3<f64>,
    ) -> f64 {
        let arch = grad_model();
        let mut g = Graph::new();
        let vars = bind_groups(&mut g, &[embed, seq]);
        let ne = embed.len();
        let tv = g.constant(t.clone().into_dyn());
        let pred = arch
            .forward_train(&mut g, &vars[..ne], &vars[ne..], w, tv)
            .unwrap();
        let loss = perception_loss(&mut g, pred, tv, Reduction::MeanBatch);
        g.scalar(loss)
    }

    #[test]
    fn full_model_gradients_match_central_differences() {
        use crate::autodiff::gradcheck::{central_diff_groups, max_rel_error_groups};
        use crate::autodiff::optim::collect_grads;
        let mut m = grad_model();
        let w = Array4::from_shape_fn((2, 2, 2, 6), |(i, f, c, s)| {
            0.5 * ((i * 53 + f * 17 + c * 5 + s) as f64 * 0.29).sin()
        });
        let t = Array3::from_shape_fn((2, 2, 3), |(i, f, l)| {
            0.4 * ((i * 13 + f * 5 + l) as f64 * 0.47).cos()
        });

        let mut g = Graph::new();
        let vars = bind_groups(&mut g, &[m.embed.params(), m.params()]);
        let ne = m.embed.params().len();
        let tv = g.constant(t.clone().into_dyn());
        let pred = m
            .forward_train(&mut g, &vars[..ne], &vars[ne..], &w, tv)
            .unwrap();
        let loss = perception_loss(&mut g, pred, tv, Reduction::MeanBatch);
        g.backward(loss);
        let all = collect_grads(&g, &vars);
        let analytic = vec![all[..ne].to_vec(), all[ne..].to_vec()];

        let (embed, seq) = m.split_mut();
        let mut groups = [embed.params_mut(), seq];
        let numeric = central_diff_groups(
            &mut groups,
            |gs| grad_loss(gs[0], gs[1], &w, &t),
            1e-5,
            Some(6),
            41,
        );
        let err = max_rel_error_groups(&analytic, &numeric);
        // Tiny-magnitude entries sit near the relative-error floor, so the
        // bound is looser than for the shallow nets.
        assert!(err < 1e-3, "max rel error {err}");
    }

    #[test]
    fn qk_norm_toggle_changes_params_and_output() {
        let mut cfg = small_pcfg();
        cfg.qk_norm = false;
        let m_off = CausalSeqModel::new(&cfg, 3, 8, 4, 5, 17).unwrap();
        assert!(m_off.params().index_of("enc0.att.qg").is_none());
        let m_on = model();
        assert!(m_on.params().index_of("enc0.att.qg").is_some());
    }
}
