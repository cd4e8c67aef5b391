//! Structural similarity over rendered frames.
//!
//! Gaussian-weighted 11x11 windows (sigma 1.5), valid mode, stabilizers
//! K1=0.01 and K2=0.03 at unit dynamic range. The default compares BT.601
//! luma; per-channel mode averages the three channel scores. Identical
//! inputs score exactly 1: both sides run through the same arithmetic, so
//! every window ratio is a value divided by itself.

use crate::config::SsimMode;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView3, ArrayView4};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

/// Normalized 1-D Gaussian taps.
fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// BT.601 luma plane of an `[h, w, 3]` image.
pub(crate) fn luma(img: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
    })
}

/// Separable valid-mode Gaussian blur; output is `[h-10, w-10]`.
fn blur(img: &Array2<f64>) -> Array2<f64> {
    let k = kernel();
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w - WINDOW + 1));
    for y in 0..h {
        for x in 0..w - WINDOW + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - WINDOW + 1, w - WINDOW + 1));
    for y in 0..h - WINDOW + 1 {
        for x in 0..w - WINDOW + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean SSIM between two single-channel planes.
fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mu_a = blur(a);
    let mu_b = blur(b);
    let mu_aa = blur(&(a * a));
    let mu_bb = blur(&(b * b));
    let mu_ab = blur(&(a * b));
    let mut sum = 0.0;
    let n = mu_a.len();
    for ((((&ma, &mb), &maa), &mbb), &mab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(mu_aa.iter())
        .zip(mu_bb.iter())
        .zip(mu_ab.iter())
    {
        let va = maa - ma * ma;
        let vb = mbb - mb * mb;
        let cov = mab - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        sum += num / den;
    }
    sum / n as f64
}

fn check_pair(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw, ac) = a.dim();
        let (bh, bw, bc) = b.dim();
        return Err(Error::shape("image pair", &[ah, aw, ac], &[bh, bw, bc]));
    }
    let (h, w, c) = a.dim();
    if c != 3 {
        return Err(Error::shape("image channels", &[3], &[c]));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::Validation(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite pixel".into()));
    }
    Ok(())
}

/// SSIM between two `[h, w, 3]` frames.
pub fn ssim_frame(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, mode: SsimMode) -> Result<f64> {
    check_pair(a, b)?;
    match mode {
        SsimMode::Luma => Ok(ssim_plane(&luma(a), &luma(b))),
        SsimMode::PerChannel => {
            let mut sum = 0.0;
            for c in 0..3 {
                let pa = a.index_axis(ndarray::Axis(2), c).to_owned();
                let pb = b.index_axis(ndarray::Axis(2), c).to_owned();
                sum += ssim_plane(&pa, &pb);
            }
            Ok(sum / 3.0)
        }
    }
}

/// Mean frame SSIM over two `[frames, h, w, 3]` videos.
pub fn ssim_video(a: ArrayView4<'_, f64>, b: ArrayView4<'_, f64>, mode: SsimMode) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "video shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let frames = a.dim().0;
    if frames == 0 {
        return Err(Error::Validation("empty video".into()));
    }
    let mut sum = 0.0;
    for f in 0..frames {
        sum += ssim_frame(
            a.index_axis(ndarray::Axis(0), f),
            b.index_axis(ndarray::Axis(0), f),
            mode,
        )?;
    }
    Ok(sum / frames as f64)
}
