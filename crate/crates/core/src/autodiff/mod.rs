//! Tape-based reverse-mode differentiation over dynamic-rank f64 arrays.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that can reach a
//! parameter. Graphs are cheap and rebuilt per training batch. The op set is
//! deliberately small: dense linear algebra, the usual activations, softmax
//! and normalization primitives with hand-derived adjoints, and the two
//! convolution shapes the EEG encoders need.
//!
//! Scalars are rank-0 arrays. Sequence batches are rank-3 `[batch, time, dim]`
//! and row batches are rank-2 `[batch, dim]`; ops that act "per row" always
//! act along the last axis.

pub mod gradcheck;
pub mod optim;

use ndarray::{ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, Ix3, IxDyn};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            back,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf that does not receive gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Insert a trainable leaf, sharing the caller's storage.
    pub fn param(&mut self, value: Rc<ArrayD<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: true,
            back: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    #[must_use]
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn rc_value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    #[must_use]
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of the last `backward` call, `None` if the node
    /// was not reached.
    #[must_use]
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Scalar value of a rank-0 node.
    #[must_use]
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.ndim(), 0, "scalar() called on rank-{} node", a.ndim());
        *a.first().expect("rank-0 array has one element")
    }

    /// Run reverse accumulation from a rank-0 loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.ndim(),
            0,
            "backward() expects a scalar loss"
        );
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(ArrayD::ones(IxDyn(&[])));
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let g = self.grads[i].as_ref().expect("grad present");
            let contribs = back(g);
            for (pid, c) in contribs {
                match &mut self.grads[pid] {
                    Some(existing) => *existing += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
    }

    fn unary(
        &mut self,
        a: Var,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let needs = self.needs_grad(a);
        let back: Option<BackFn> = if needs {
            let pid = a.0;
            Some(Box::new(move |g| vec![(pid, back(g))]))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let value = va + vb;
        self.binary_samegrad(a, b, value, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let value = va - vb;
        self.binary_samegrad(a, b, value, |g| g.clone(), |g| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let value = va * vb;
        let (ra, rb) = (self.rc_value(a), self.rc_value(b));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ia, ib) = (a.0, b.0);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((ia, g * &*rb));
                }
                if nb {
                    out.push((ib, g * &*ra));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    fn binary_samegrad(
        &mut self,
        a: Var,
        b: Var,
        value: ArrayD<f64>,
        back_a: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
        back_b: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ia, ib) = (a.0, b.0);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((ia, back_a(g)));
                }
                if nb {
                    out.push((ib, back_b(g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        self.unary(a, value, |g| -g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.unary(a, value, move |g| g * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.unary(a, value, |g| g.clone())
    }

    /// Multiply every element of `a` by the rank-0 node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).ndim(), 0, "mul_scalar_var: s must be rank 0");
        let sv = self.scalar(s);
        let value = self.value(a) * sv;
        let ra = self.rc_value(a);
        let (na, ns) = (self.needs_grad(a), self.needs_grad(s));
        let (ia, is) = (a.0, s.0);
        let back: Option<BackFn> = if na || ns {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((ia, g * sv));
                }
                if ns {
                    let ds = (g * &*ra).sum();
                    out.push((is, ArrayD::from_elem(IxDyn(&[]), ds)));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || ns, back)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::recip);
        let y = value.clone();
        self.unary(a, value, move |g| g * &(-&y * &y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let y = value.clone();
        self.unary(a, value, move |g| g * &y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.rc_value(a);
        let value = x.mapv(f64::ln);
        self.unary(a, value, move |g| g / &*x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let y = value.clone();
        self.unary(a, value, move |g| g / &(&y * 2.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let y = value.clone();
        self.unary(a, value, move |g| g * &y.mapv(|t| 1.0 - t * t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.rc_value(a);
        let value = x.mapv(|v| v.max(0.0));
        self.unary(a, value, move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out).and(&*x).for_each(|o, &xv| {
                if xv <= 0.0 {
                    *o = 0.0;
                }
            });
            out
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.rc_value(a);
        let value = x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        self.unary(a, value, move |g| {
            let d = x.mapv(|v| {
                let u = C * (v + A * v * v * v);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
            });
            g * &d
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.value(a).shape().to_vec();
        let n_old: usize = old.iter().product();
        let n_new: usize = shape.iter().product();
        assert_eq!(n_old, n_new, "reshape: element count mismatch");
        let value = self
            .value(a)
            .to_shape(IxDyn(shape))
            .expect("contiguous reshape")
            .to_owned();
        self.unary(a, value, move |g| {
            g.to_shape(IxDyn(&old))
                .expect("contiguous reshape")
                .to_owned()
        })
    }

    /// Swap the last two axes (rank 2 or 3).
    pub fn swap_last2(&mut self, a: Var) -> Var {
        let nd = self.value(a).ndim();
        assert!(nd >= 2, "swap_last2: rank must be >= 2");
        let mut value = self.value(a).clone();
        value.swap_axes(nd - 2, nd - 1);
        let value = value.as_standard_layout().to_owned();
        self.unary(a, value, move |g| {
            let mut gt = g.clone();
            gt.swap_axes(nd - 2, nd - 1);
            gt.as_standard_layout().to_owned()
        })
    }

    /// Slice `start..end` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Var {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let nd = shape.len();
        let d = shape[nd - 1];
        assert!(start < end && end <= d, "slice_last: bad range");
        let value = self
            .value(a)
            .slice_axis(Axis(nd - 1), ndarray::Slice::from(start..end))
            .to_owned();
        self.unary(a, value, move |g| {
            let mut full = ArrayD::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(nd - 1), ndarray::Slice::from(start..end))
                .assign(g);
            full
        })
    }

    /// Concatenate along `axis`. All parts must agree on the other axes.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| self.value(*p).shape()[axis])
            .collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs: Vec<bool> = parts.iter().map(|p| self.needs_grad(*p)).collect();
        let any = needs.iter().any(|&n| n);
        let back: Option<BackFn> = if any {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let mut off = 0usize;
                for (i, &sz) in sizes.iter().enumerate() {
                    if needs[i] {
                        let piece = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(off..off + sz))
                            .to_owned();
                        out.push((ids[i], piece));
                    }
                    off += sz;
                }
                out
            }))
        } else {
            None
        };
        self.push(value, any, back)
    }

    /// Tile a leading axis of size 1 up to `n` copies.
    pub fn repeat0(&mut self, a: Var, n: usize) -> Var {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        assert_eq!(shape[0], 1, "repeat0: leading axis must be 1");
        let mut tiled = Vec::with_capacity(n);
        for _ in 0..n {
            tiled.push(self.value(a).view());
        }
        let value = ndarray::concatenate(Axis(0), &tiled).expect("repeat0 shapes");
        self.unary(a, value, move |g| {
            g.sum_axis(Axis(0)).insert_axis(Axis(0))
        })
    }

    // ---- broadcasting add/mul ----

    /// Add a rank-1 bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let d = *self.value(x).shape().last().expect("rank >= 1");
        assert_eq!(self.value(b).shape(), &[d], "add_bias: bias must be [d]");
        let value = self.value(x) + self.value(b);
        let nd = self.value(x).ndim();
        self.binary_samegrad(x, b, value, |g| g.clone(), move |g| {
            let mut acc = g.clone();
            for _ in 0..nd - 1 {
                acc = acc.sum_axis(Axis(0));
            }
            acc
        })
    }

    /// Multiply by a rank-1 gain over the last axis of `x`.
    pub fn mul_bias(&mut self, x: Var, gain: Var) -> Var {
        let d = *self.value(x).shape().last().expect("rank >= 1");
        assert_eq!(self.value(gain).shape(), &[d], "mul_bias: gain must be [d]");
        let value = self.value(x) * self.value(gain);
        let (rx, rg) = (self.rc_value(x), self.rc_value(gain));
        let (nx, ng) = (self.needs_grad(x), self.needs_grad(gain));
        let (ix, ig) = (x.0, gain.0);
        let nd = rx.ndim();
        let back: Option<BackFn> = if nx || ng {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if nx {
                    out.push((ix, g * &*rg));
                }
                if ng {
                    let mut acc = g * &*rx;
                    for _ in 0..nd - 1 {
                        acc = acc.sum_axis(Axis(0));
                    }
                    out.push((ig, acc));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, nx || ng, back)
    }

    /// Add `b` (leading axis of size 1, other axes equal) to every slice of `x`.
    pub fn add_bcast0(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        assert_eq!(bs[0], 1, "add_bcast0: b leading axis must be 1");
        assert_eq!(&xs[1..], &bs[1..], "add_bcast0: trailing axes must match");
        let value = self.value(x) + self.value(b);
        self.binary_samegrad(x, b, value, |g| g.clone(), |g| {
            g.sum_axis(Axis(0)).insert_axis(Axis(0))
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.unary(a, value, move |g| {
            let gv = *g.first().expect("scalar grad");
            ArrayD::from_elem(IxDyn(&shape), gv)
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n: usize = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul: a rank 2");
        let vb = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul: b rank 2");
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dims");
        let value = par_matmul(va, vb).into_dyn();
        let (ra, rb) = (self.rc_value(a), self.rc_value(b));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ia, ib) = (a.0, b.0);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("rank 2 grad");
                let mut out = Vec::new();
                if na {
                    let vb = rb.view().into_dimensionality::<Ix2>().expect("rank 2");
                    out.push((ia, par_matmul(g2, vb.t()).into_dyn()));
                }
                if nb {
                    let va = ra.view().into_dimensionality::<Ix2>().expect("rank 2");
                    out.push((ib, par_matmul(va.t(), g2).into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    /// Batched 3-D matrix product: `[n,p,q] x [n,q,r] -> [n,p,r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix3>().expect("bmm: a rank 3");
        let vb = self.value(b).view().into_dimensionality::<Ix3>().expect("bmm: b rank 3");
        let (n, p, q) = va.dim();
        let (n2, q2, r) = vb.dim();
        assert_eq!(n, n2, "bmm: batch dims");
        assert_eq!(q, q2, "bmm: inner dims");
        let mut value = ndarray::Array3::<f64>::zeros((n, p, r));
        for i in 0..n {
            value
                .index_axis_mut(Axis(0), i)
                .assign(&va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i)));
        }
        let (ra, rb) = (self.rc_value(a), self.rc_value(b));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ia, ib) = (a.0, b.0);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank 3 grad");
                let va = ra.view().into_dimensionality::<Ix3>().expect("rank 3");
                let vb = rb.view().into_dimensionality::<Ix3>().expect("rank 3");
                let mut out = Vec::new();
                if na {
                    let mut da = ndarray::Array3::<f64>::zeros(va.dim());
                    for i in 0..va.dim().0 {
                        da.index_axis_mut(Axis(0), i).assign(
                            &g3.index_axis(Axis(0), i)
                                .dot(&vb.index_axis(Axis(0), i).t()),
                        );
                    }
                    out.push((ia, da.into_dyn()));
                }
                if nb {
                    let mut db = ndarray::Array3::<f64>::zeros(vb.dim());
                    for i in 0..vb.dim().0 {
                        db.index_axis_mut(Axis(0), i).assign(
                            &va.index_axis(Axis(0), i)
                                .t()
                                .dot(&g3.index_axis(Axis(0), i)),
                        );
                    }
                    out.push((ib, db.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), na || nb, back)
    }

    // ---- softmax family ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = softmax_lanes(self.value(a), None);
        let y = Rc::new(value.clone());
        let yc = Rc::clone(&y);
        self.unary(a, value, move |g| softmax_backward(g, &yc))
    }

    /// Softmax over the last axis with a boolean keep-mask applied to the
    /// last two axes. Masked cells are exactly zero in the output. Rows with
    /// no allowed cell are a caller bug (validated upstream) and panic here.
    pub fn masked_softmax_last(&mut self, a: Var, mask: &ndarray::Array2<bool>) -> Var {
        let value = softmax_lanes(self.value(a), Some(mask));
        let y = Rc::new(value.clone());
        let yc = Rc::clone(&y);
        self.unary(a, value, move |g| softmax_backward(g, &yc))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let nd = x.ndim();
        let mut value = x.clone();
        for mut lane in value.lanes_mut(Axis(nd - 1)) {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|v| v - lse);
        }
        let y = value.clone();
        self.unary(a, value, move |g| {
            let nd = y.ndim();
            let mut out = g.clone();
            let lanes_g = g.lanes(Axis(nd - 1));
            let lanes_y = y.lanes(Axis(nd - 1));
            for ((mut lane_out, lane_g), lane_y) in out
                .lanes_mut(Axis(nd - 1))
                .into_iter()
                .zip(lanes_g)
                .zip(lanes_y)
            {
                let s: f64 = lane_g.sum();
                for ((o, &gv), &yv) in lane_out.iter_mut().zip(lane_g).zip(lane_y) {
                    *o = gv - yv.exp() * s;
                }
            }
            out
        })
    }

    /// Per-lane standardization over the last axis, no affine part.
    pub fn layernorm_last(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let nd = x.ndim();
        let d = *x.shape().last().expect("rank >= 1");
        let mut value = x.clone();
        let mut inv_std = Vec::new();
        for mut lane in value.lanes_mut(Axis(nd - 1)) {
            let mu = lane.sum() / d as f64;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            lane.mapv_inplace(|v| (v - mu) * inv);
        }
        let y = value.clone();
        self.unary(a, value, move |g| {
            let nd = y.ndim();
            let d = *y.shape().last().expect("rank >= 1") as f64;
            let mut out = g.clone();
            for (((mut lane_out, lane_g), lane_y), &inv) in out
                .lanes_mut(Axis(nd - 1))
                .into_iter()
                .zip(g.lanes(Axis(nd - 1)))
                .zip(y.lanes(Axis(nd - 1)))
                .zip(inv_std.iter())
            {
                let mean_g = lane_g.sum() / d;
                let mean_gy = lane_g
                    .iter()
                    .zip(lane_y.iter())
                    .map(|(&gv, &yv)| gv * yv)
                    .sum::<f64>()
                    / d;
                for ((o, &gv), &yv) in lane_out.iter_mut().zip(&lane_g).zip(&lane_y) {
                    *o = inv * (gv - mean_g - yv * mean_gy);
                }
            }
            out
        })
    }

    /// L2-normalize each lane along the last axis.
    pub fn l2norm_last(&mut self, a: Var, eps: f64) -> Var {
        let x = self.rc_value(a);
        let nd = x.ndim();
        let mut value = (*x).clone();
        let mut radii = Vec::new();
        for mut lane in value.lanes_mut(Axis(nd - 1)) {
            let r = (lane.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            radii.push(r);
            lane.mapv_inplace(|v| v / r);
        }
        self.unary(a, value, move |g| {
            let nd = x.ndim();
            let mut out = g.clone();
            for (((mut lane_out, lane_g), lane_x), &r) in out
                .lanes_mut(Axis(nd - 1))
                .into_iter()
                .zip(g.lanes(Axis(nd - 1)))
                .zip(x.lanes(Axis(nd - 1)))
                .zip(radii.iter())
            {
                let xg: f64 = lane_g
                    .iter()
                    .zip(lane_x.iter())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                let r3 = r * r * r;
                for ((o, &gv), &xv) in lane_out.iter_mut().zip(&lane_g).zip(&lane_x) {
                    *o = gv / r - xv * xg / r3;
                }
            }
            out
        })
    }

    // ---- convolution / pooling ----

    /// Depthwise 1-D valid convolution along the last axis.
    ///
    /// `x` is `[n, c, w]`, `k` is `[c, m, kw]`; the output is
    /// `[n, c*m, w-kw+1]` with output channel `c*m_per + j` produced by input
    /// channel `c` and kernel `j`.
    pub fn conv1d_depthwise(&mut self, x: Var, k: Var) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix3>().expect("conv x rank 3");
        let vk = self.value(k).view().into_dimensionality::<Ix3>().expect("conv k rank 3");
        let (n, c, w) = vx.dim();
        let (ck, m, kw) = vk.dim();
        assert_eq!(c, ck, "conv1d_depthwise: channel mismatch");
        assert!(kw <= w, "conv1d_depthwise: kernel longer than input");
        let wo = w - kw + 1;
        let mut value = ndarray::Array3::<f64>::zeros((n, c * m, wo));
        for ni in 0..n {
            for ci in 0..c {
                for mi in 0..m {
                    for o in 0..wo {
                        let mut acc = 0.0;
                        for t in 0..kw {
                            acc += vx[(ni, ci, o + t)] * vk[(ci, mi, t)];
                        }
                        value[(ni, ci * m + mi, o)] = acc;
                    }
                }
            }
        }
        let (rx, rk) = (self.rc_value(x), self.rc_value(k));
        let (nx, nk) = (self.needs_grad(x), self.needs_grad(k));
        let (ix, ik) = (x.0, k.0);
        let back: Option<BackFn> = if nx || nk {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank 3 grad");
                let vx = rx.view().into_dimensionality::<Ix3>().expect("rank 3");
                let vk = rk.view().into_dimensionality::<Ix3>().expect("rank 3");
                let (n, c, w) = vx.dim();
                let (_, m, kw) = vk.dim();
                let wo = w - kw + 1;
                let mut out = Vec::new();
                if nx {
                    let mut dx = ndarray::Array3::<f64>::zeros((n, c, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for mi in 0..m {
                                for o in 0..wo {
                                    let gv = g3[(ni, ci * m + mi, o)];
                                    for t in 0..kw {
                                        dx[(ni, ci, o + t)] += gv * vk[(ci, mi, t)];
                                    }
                                }
                            }
                        }
                    }
                    out.push((ix, dx.into_dyn()));
                }
                if nk {
                    let mut dk = ndarray::Array3::<f64>::zeros((c, m, kw));
                    for ni in 0..n {
                        for ci in 0..c {
                            for mi in 0..m {
                                for o in 0..wo {
                                    let gv = g3[(ni, ci * m + mi, o)];
                                    for t in 0..kw {
                                        dk[(ci, mi, t)] += gv * vx[(ni, ci, o + t)];
                                    }
                                }
                            }
                        }
                    }
                    out.push((ik, dk.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), nx || nk, back)
    }

    /// Non-overlapping average pooling along the last axis; the window must
    /// divide the axis length.
    pub fn avgpool_last(&mut self, a: Var, window: usize) -> Var {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let nd = shape.len();
        let l = shape[nd - 1];
        assert!(window > 0 && l % window == 0, "avgpool_last: window must divide length");
        let lo = l / window;
        let mut out_shape = shape.clone();
        out_shape[nd - 1] = lo;
        let mut value = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (mut lane_o, lane_i) in value
            .lanes_mut(Axis(nd - 1))
            .into_iter()
            .zip(self.value(a).lanes(Axis(nd - 1)))
        {
            for j in 0..lo {
                let mut acc = 0.0;
                for r in 0..window {
                    acc += lane_i[j * window + r];
                }
                lane_o[j] = acc / window as f64;
            }
        }
        self.unary(a, value, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&shape));
            let nd = shape.len();
            for (mut lane_x, lane_g) in dx
                .lanes_mut(Axis(nd - 1))
                .into_iter()
                .zip(g.lanes(Axis(nd - 1)))
            {
                let lo = lane_g.len();
                for j in 0..lo {
                    let gv = lane_g[j] / window as f64;
                    for r in 0..window {
                        lane_x[j * window + r] = gv;
                    }
                }
            }
            dx
        })
    }
}

fn softmax_backward(g: &ArrayD<f64>, y: &ArrayD<f64>) -> ArrayD<f64> {
    let nd = y.ndim();
    let mut out = g.clone();
    for ((mut lane_out, lane_g), lane_y) in out
        .lanes_mut(Axis(nd - 1))
        .into_iter()
        .zip(g.lanes(Axis(nd - 1)))
        .zip(y.lanes(Axis(nd - 1)))
    {
        let s: f64 = lane_g
            .iter()
            .zip(lane_y.iter())
            .map(|(&gv, &yv)| gv * yv)
            .sum();
        for ((o, &gv), &yv) in lane_out.iter_mut().zip(&lane_g).zip(&lane_y) {
            *o = yv * (gv - s);
        }
    }
    out
}

/// Softmax over the last axis. With a mask, only cells whose mask entry is
/// true participate; the rest are exactly 0. The mask indexes the last two
/// axes and is shared across any leading batch axes.
fn softmax_lanes(x: &ArrayD<f64>, mask: Option<&ndarray::Array2<bool>>) -> ArrayD<f64> {
    let nd = x.ndim();
    let d = *x.shape().last().expect("rank >= 1");
    if let Some(m) = mask {
        assert!(nd >= 2, "masked softmax needs rank >= 2");
        assert_eq!(m.ncols(), d, "mask width mismatch");
        assert_eq!(m.nrows(), x.shape()[nd - 2], "mask height mismatch");
        for r in 0..m.nrows() {
            assert!(
                (0..m.ncols()).any(|c| m[(r, c)]),
                "masked softmax: row {r} has no allowed cell"
            );
        }
    }
    let mut out = x.clone();
    let rows_per_block = if nd >= 2 { x.shape()[nd - 2] } else { 1 };
    for (idx, mut lane) in out.lanes_mut(Axis(nd - 1)).into_iter().enumerate() {
        let row = idx % rows_per_block;
        let allowed = |c: usize| mask.map_or(true, |m| m[(row, c)]);
        let mut mx = f64::NEG_INFINITY;
        for c in 0..d {
            if allowed(c) {
                mx = mx.max(lane[c]);
            }
        }
        let mut denom = 0.0;
        for c in 0..d {
            if allowed(c) {
                denom += (lane[c] - mx).exp();
            }
        }
        for c in 0..d {
            lane[c] = if allowed(c) {
                (lane[c] - mx).exp() / denom
            } else {
                0.0
            };
        }
    }
    out
}

/// Deterministic parallel matrix product. Rows of the output are split into
/// chunks that each run the same sequential kernel, so the result is
/// bit-identical to `a.dot(b)` at any thread count.
#[must_use]
pub fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> ndarray::Array2<f64> {
    use ndarray::parallel::prelude::*;
    let (m, k) = a.dim();
    let n = b.ncols();
    let work = m * k * n;
    if work < 4_000_000 || m < 16 {
        return a.dot(&b);
    }
    let threads = rayon::current_num_threads().max(1);
    let chunk = m.div_ceil(threads * 2).max(8);
    let mut out = ndarray::Array2::<f64>::zeros((m, n));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| {
            oc.assign(&ac.dot(&b));
        });
    out
}
