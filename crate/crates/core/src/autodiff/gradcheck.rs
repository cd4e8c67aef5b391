//! Central finite-difference gradient checking.
//!
//! The checker perturbs parameter entries one coordinate at a time and
//! compares `(f(x+h) - f(x-h)) / 2h` against analytic gradients. Large
//! tensors can be subsampled with a seeded coordinate draw so full-model
//! checks stay fast.

use super::optim::ParamGroup;
use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Numeric gradient entries `(flat_index, value)` for a single tensor.
///
/// With `max_coords = Some(k)` only `k` seeded distinct coordinates are
/// evaluated; otherwise every coordinate is.
pub fn central_diff_entries(
    param: &ArrayD<f64>,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Vec<(usize, f64)> {
    let coords = pick_coords(param.len(), max_coords, seed);
    let mut work = param.clone();
    let mut out = Vec::with_capacity(coords.len());
    for idx in coords {
        let orig = work.as_slice().expect("standard layout")[idx];
        let h = eps * orig.abs().max(1.0);
        work.as_slice_mut().expect("standard layout")[idx] = orig + h;
        let up = f(&work);
        work.as_slice_mut().expect("standard layout")[idx] = orig - h;
        let down = f(&work);
        work.as_slice_mut().expect("standard layout")[idx] = orig;
        out.push((idx, (up - down) / (2.0 * h)));
    }
    out
}

/// Numeric gradients across several parameter groups.
///
/// Returns `(group_index, entry_index, flat_index, value)` tuples. The loss
/// closure sees the groups with one coordinate perturbed in place.
pub fn central_diff_groups(
    groups: &mut [&mut ParamGroup],
    mut f: impl FnMut(&[&ParamGroup]) -> f64,
    eps: f64,
    max_coords_per_tensor: Option<usize>,
    seed: u64,
) -> Vec<(usize, usize, usize, f64)> {
    let mut out = Vec::new();
    let n_groups = groups.len();
    for gi in 0..n_groups {
        for ei in 0..groups[gi].len() {
            let len = groups[gi].entry(ei).value.len();
            let coords = pick_coords(len, max_coords_per_tensor, seed ^ hash2(gi, ei));
            for idx in coords {
                let orig = groups[gi].entry(ei).value.as_slice().expect("layout")[idx];
                let h = eps * orig.abs().max(1.0);
                set_at(groups[gi], ei, idx, orig + h);
                let up = eval(groups, &mut f);
                set_at(groups[gi], ei, idx, orig - h);
                let down = eval(groups, &mut f);
                set_at(groups[gi], ei, idx, orig);
                out.push((gi, ei, idx, (up - down) / (2.0 * h)));
            }
        }
    }
    out
}

fn eval(groups: &mut [&mut ParamGroup], f: &mut impl FnMut(&[&ParamGroup]) -> f64) -> f64 {
    let views: Vec<&ParamGroup> = groups.iter().map(|g| &**g).collect();
    f(&views)
}

fn set_at(group: &mut ParamGroup, entry: usize, idx: usize, v: f64) {
    group.value_mut(entry).as_slice_mut().expect("layout")[idx] = v;
}

fn hash2(a: usize, b: usize) -> u64 {
    // splitmix-style scramble, stable across platforms
    let mut x = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

fn pick_coords(len: usize, max_coords: Option<usize>, seed: u64) -> Vec<usize> {
    match max_coords {
        Some(k) if len > k => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = (0..len).collect();
            all.shuffle(&mut rng);
            let mut picked = all[..k].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Relative error between two gradient values.
#[must_use]
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error of an analytic gradient tensor at sampled coordinates.
#[must_use]
pub fn max_rel_error_at(analytic: &ArrayD<f64>, numeric: &[(usize, f64)]) -> f64 {
    let flat = analytic.as_slice().expect("standard layout");
    numeric
        .iter()
        .map(|&(idx, n)| rel_error(flat[idx], n))
        .fold(0.0, f64::max)
}

/// Max relative error across groups for `central_diff_groups` output.
/// `analytic[gi][ei]` must align with the bound group layout.
#[must_use]
pub fn max_rel_error_groups(
    analytic: &[Vec<ArrayD<f64>>],
    numeric: &[(usize, usize, usize, f64)],
) -> f64 {
    numeric
        .iter()
        .map(|&(gi, ei, idx, n)| {
            let flat = analytic[gi][ei].as_slice().expect("standard layout");
            rel_error(flat[idx], n)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap();
        // f = sum(x^3), df/dx_i = 3 x_i^2
        let numeric = central_diff_entries(&x, |a| a.iter().map(|v| v * v * v).sum(), 1e-6, None, 0);
        for (idx, n) in numeric {
            let expect = 3.0 * x.as_slice().unwrap()[idx].powi(2);
            assert!(rel_error(expect, n) < 1e-8, "idx {idx}: {n} vs {expect}");
        }
    }

    #[test]
    fn subsampling_picks_distinct_sorted_coords() {
        let coords = pick_coords(100, Some(10), 3);
        assert_eq!(coords.len(), 10);
        let mut sorted = coords.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, coords);
    }

    #[test]
    fn group_diff_walks_every_group() {
        let mut g1 = ParamGroup::new();
        g1.push("a", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut g2 = ParamGroup::new();
        g2.push("b", ArrayD::from_elem(IxDyn(&[1]), 2.0));
        // f = sum(a) * b
        let numeric = central_diff_groups(
            &mut [&mut g1, &mut g2],
            |gs| gs[0].get("a").unwrap().sum() * gs[1].get("b").unwrap()[[0]],
            1e-6,
            None,
            0,
        );
        assert_eq!(numeric.len(), 3);
        for (gi, _ei, _idx, n) in numeric {
            let expect = if gi == 0 { 2.0 } else { 2.0 };
            assert!(rel_error(expect, n) < 1e-8);
        }
    }
}
