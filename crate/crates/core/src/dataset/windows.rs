//! Sliding-window extraction over EEG segments.
//!
//! A segment of `samples` samples is cut into one window per decoded frame.
//! Window starts are evenly spaced: frame i starts at `i * stride` with
//! `stride = (samples - window) / (frames - 1)`, so the first window starts
//! at 0 and the last ends exactly at the segment end. That forces
//! `(samples - window)` to be divisible by `frames - 1`; anything else is
//! rejected up front rather than silently truncated.

use crate::error::{Error, Result};
use ndarray::{Array3, ArrayView2};

/// Window stride in samples for the given geometry.
///
/// With a single frame the window must cover the whole segment and the
/// stride is reported as 0. Errors name the nearest valid window length.
pub fn window_stride(samples: usize, frames: usize, window: usize) -> Result<usize> {
    if frames == 0 {
        return Err(Error::Config("frames must be >= 1".into()));
    }
    if window == 0 || window > samples {
        return Err(Error::Config(format!(
            "window ({window}) must be in 1..={samples}"
        )));
    }
    if frames == 1 {
        if window != samples {
            return Err(Error::Config(format!(
                "with frames = 1 the window must cover the whole segment: \
                 window = {window}, samples = {samples}"
            )));
        }
        return Ok(0);
    }
    let span = samples - window;
    let step = frames - 1;
    if span % step != 0 {
        let closest = closest_valid_window(samples, frames, window)
            .expect("a valid window length exists for frames >= 2");
        return Err(Error::Config(format!(
            "window {window} does not tile {samples} samples into {frames} \
             evenly spaced frames; closest valid window is {closest}"
        )));
    }
    Ok(span / step)
}

/// Valid window length nearest to `window`; ties take the smaller one.
fn closest_valid_window(samples: usize, frames: usize, window: usize) -> Option<usize> {
    let step = frames - 1;
    let mut best: Option<usize> = None;
    let mut w = samples;
    loop {
        if (samples - w) % step == 0 {
            let better = match best {
                None => true,
                Some(b) => {
                    let (dw, db) = (w.abs_diff(window), b.abs_diff(window));
                    dw < db || (dw == db && w < b)
                }
            };
            if better {
                best = Some(w);
            }
        }
        if w == 1 {
            break;
        }
        w -= 1;
    }
    best
}

/// Cut a `[channels, samples]` segment into `[frames, channels, window]`.
pub fn slice_windows(
    segment: ArrayView2<'_, f64>,
    frames: usize,
    window: usize,
) -> Result<Array3<f64>> {
    let (channels, samples) = segment.dim();
    let stride = window_stride(samples, frames, window)?;
    let mut out = Array3::zeros((frames, channels, window));
    for f in 0..frames {
        let start = f * stride;
        out.index_axis_mut(ndarray::Axis(0), f)
            .assign(&segment.slice(ndarray::s![.., start..start + window]));
    }
    Ok(out)
}

/// Window start offsets, mostly useful for reporting and tests.
pub fn window_offsets(samples: usize, frames: usize, window: usize) -> Result<Vec<usize>> {
    let stride = window_stride(samples, frames, window)?;
    Ok((0..frames).map(|f| f * stride).collect())
}
