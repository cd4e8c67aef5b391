//! Hue correlation between reconstructed and reference frames.
//!
//! Pixels are converted to HSV hue in `[0, 1)`; a pixel pair is skipped when
//! either side is effectively achromatic (saturation times value under the
//! threshold), because hue is meaningless for gray. The remaining pairs get
//! a plain Pearson correlation. Fewer than two usable pairs, or zero hue
//! variance on either side, is an error rather than a silent zero.

use crate::error::{Error, Result};
use ndarray::{ArrayView3, ArrayView4};

/// HSV conversion for one pixel; hue in `[0, 1)`, 0 when achromatic.
pub fn hue_sat_val(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let val = max;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, sat, val);
    }
    let h6 = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut hue = h6 / 6.0;
    if hue >= 1.0 {
        hue -= 1.0;
    }
    (hue, sat, val)
}

fn collect_pairs(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    threshold: f64,
    pairs: &mut Vec<(f64, f64)>,
) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw, ac) = a.dim();
        let (bh, bw, bc) = b.dim();
        return Err(Error::shape("image pair", &[ah, aw, ac], &[bh, bw, bc]));
    }
    let (h, w, c) = a.dim();
    if c != 3 {
        return Err(Error::shape("image channels", &[3], &[c]));
    }
    for y in 0..h {
        for x in 0..w {
            let (ha, sa, va) = hue_sat_val(a[[y, x, 0]], a[[y, x, 1]], a[[y, x, 2]]);
            let (hb, sb, vb) = hue_sat_val(b[[y, x, 0]], b[[y, x, 1]], b[[y, x, 2]]);
            if sa * va < threshold || sb * vb < threshold {
                continue;
            }
            pairs.push((ha, hb));
        }
    }
    Ok(())
}

fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Undefined(format!(
            "hue correlation needs at least 2 chromatic pixel pairs, found {n}"
        )));
    }
    let nf = n as f64;
    let mean_a = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_b = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let dx = x - mean_a;
        let dy = y - mean_b;
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined(
            "hue correlation undefined: zero hue variance".into(),
        ));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Pearson correlation of per-pixel hues between two frames.
pub fn hue_pcc_frame(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    threshold: f64,
) -> Result<f64> {
    let mut pairs = Vec::new();
    collect_pairs(a, b, threshold, &mut pairs)?;
    pearson(&pairs)
}

/// Hue correlation for a clip: the mean of per-frame correlations. Any
/// frame with an undefined correlation fails the whole clip.
pub fn hue_pcc_video(
    a: ArrayView4<'_, f64>,
    b: ArrayView4<'_, f64>,
    threshold: f64,
) -> Result<f64> {
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
    let mut total = 0.0;
    for f in 0..frames {
        total += hue_pcc_frame(
            a.index_axis(ndarray::Axis(0), f),
            b.index_axis(ndarray::Axis(0), f),
            threshold,
        )?;
    }
    Ok(total / frames as f64)
}
