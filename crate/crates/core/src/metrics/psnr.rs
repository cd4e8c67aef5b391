//! Peak signal-to-noise ratio at unit dynamic range.
//!
//! The mean squared error pools every pixel and channel (and frame, for
//! videos), so a clip gets one number. Identical inputs give positive
//! infinity; reports keep that as a row value and clamp it when averaging.

use crate::error::{Error, Result};
use ndarray::{ArrayView3, ArrayView4};

fn mse<'a>(
    a: impl Iterator<Item = &'a f64>,
    b: impl Iterator<Item = &'a f64>,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&x, &y) in a.zip(b) {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        let d = x - y;
        sum += d * d;
        n += 1;
    }
    Ok((sum, n))
}

fn to_db(sum: f64, n: usize) -> f64 {
    if sum == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (sum / n as f64).log10()
    }
}

/// PSNR between two `[h, w, 3]` frames.
pub fn psnr_frame(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        let (ah, aw, ac) = a.dim();
        let (bh, bw, bc) = b.dim();
        return Err(Error::shape("image pair", &[ah, aw, ac], &[bh, bw, bc]));
    }
    let (sum, n) = mse(a.iter(), b.iter())?;
    Ok(to_db(sum, n))
}

/// PSNR between two `[frames, h, w, 3]` videos, pooled over frames.
pub fn psnr_video(a: ArrayView4<'_, f64>, b: ArrayView4<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "video shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Validation("empty video".into()));
    }
    let (sum, n) = mse(a.iter(), b.iter())?;
    Ok(to_db(sum, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn uniform_offset_has_known_value() {
        let a = Array3::from_elem((4, 5, 3), 0.4);
        let b = Array3::from_elem((4, 5, 3), 0.5);
        // mse = 0.01 exactly-ish; psnr = 20 dB
        let p = psnr_frame(a.view(), b.view()).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn identical_frames_are_infinite() {
        let a = Array3::from_shape_fn((3, 3, 3), |(y, x, c)| (y + x + c) as f64 * 0.1);
        let p = psnr_frame(a.view(), a.view()).unwrap();
        assert!(p.is_infinite() && p > 0.0);
    }

    #[test]
    fn smaller_error_scores_higher() {
        let a = Array3::from_elem((4, 4, 3), 0.5);
        let near = Array3::from_elem((4, 4, 3), 0.52);
        let far = Array3::from_elem((4, 4, 3), 0.7);
        let pn = psnr_frame(a.view(), near.view()).unwrap();
        let pf = psnr_frame(a.view(), far.view()).unwrap();
        assert!(pn > pf);
    }

    #[test]
    fn video_pools_over_frames() {
        // one perfect frame, one offset frame: pooled mse is half the offset
        let mut a = Array4::from_elem((2, 4, 4, 3), 0.4);
        let b = Array4::from_elem((2, 4, 4, 3), 0.4);
        for v in a.index_axis_mut(ndarray::Axis(0), 1).iter_mut() {
            *v = 0.5;
        }
        let p = psnr_video(a.view(), b.view()).unwrap();
        let expect = -10.0 * (0.005f64).log10();
        assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array3::zeros((4, 4, 3));
        let b = Array3::zeros((4, 5, 3));
        assert!(psnr_frame(a.view(), b.view()).is_err());
    }
}
