//! N-way top-K identification from a score matrix.
//!
//! Each query is scored against every class. A trial draws N-1 distractor
//! classes without replacement, and counts a hit when the true class ranks
//! inside the top K of the candidate set. Ties go to the true class: only a
//! strictly greater distractor score pushes it down. When N equals the class
//! count the candidate set is fixed, so a single deterministic trial per
//! query replaces the repeats.

use crate::embedding::derive_seed;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One identification trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NwayTrial {
    pub query: usize,
    pub repeat: usize,
    /// Candidate classes, true class first.
    pub candidates: Vec<usize>,
    pub hit: bool,
}

/// Aggregate identification outcome.
#[derive(Clone, Debug)]
pub struct NwayOutcome {
    /// Hit rate over all trials.
    pub accuracy: f64,
    /// Hit rate per query, averaged over its repeats.
    pub per_query: Vec<f64>,
    pub trials: Vec<NwayTrial>,
}

/// Run N-way top-K identification.
///
/// `scores` is `[queries, classes]`, higher meaning more similar, and
/// `labels` holds the true class per query. Per-query randomness comes from
/// a stream derived off `seed` and the query index, so outcomes do not
/// depend on how queries are grouped.
pub fn nway_topk(
    scores: ArrayView2<'_, f64>,
    labels: &[usize],
    n_way: usize,
    top_k: usize,
    repeats: usize,
    seed: u64,
) -> Result<NwayOutcome> {
    let (queries, classes) = scores.dim();
    if labels.len() != queries {
        return Err(Error::Validation(format!(
            "{queries} score rows but {} labels",
            labels.len()
        )));
    }
    if n_way < 2 || n_way > classes {
        return Err(Error::Config(format!(
            "n_way ({n_way}) must be in 2..={classes}"
        )));
    }
    if top_k == 0 || top_k >= n_way {
        return Err(Error::Config(format!(
            "top_k ({top_k}) must be in 1..{n_way}"
        )));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside 0..{classes}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite identification score".into()));
    }

    let effective = if n_way == classes { 1 } else { repeats };
    let mut trials = Vec::with_capacity(queries * effective);
    let mut per_query = Vec::with_capacity(queries);
    let mut hits_total = 0usize;
    for (q, &label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("q{q}")));
        let gt = scores[[q, label]];
        let mut hits_q = 0usize;
        for r in 0..effective {
            let mut candidates = Vec::with_capacity(n_way);
            candidates.push(label);
            if n_way == classes {
                candidates.extend((0..classes).filter(|&c| c != label));
            } else {
                let drawn =
                    rand::seq::index::sample(&mut rng, classes - 1, n_way - 1);
                candidates.extend(drawn.iter().map(|i| if i >= label { i + 1 } else { i }));
            }
            let stronger = candidates[1..]
                .iter()
                .filter(|&&c| scores[[q, c]] > gt)
                .count();
            let hit = stronger < top_k;
            if hit {
                hits_q += 1;
                hits_total += 1;
            }
            trials.push(NwayTrial {
                query: q,
                repeat: r,
                candidates,
                hit,
            });
        }
        per_query.push(hits_q as f64 / effective as f64);
    }
    Ok(NwayOutcome {
        accuracy: hits_total as f64 / (queries * effective) as f64,
        per_query,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    // Exact hit probability by enumerating every distractor subset.
    fn exhaustive(scores: &Array2<f64>, q: usize, label: usize, n_way: usize, top_k: usize) -> f64 {
        let classes = scores.ncols();
        let others: Vec<usize> = (0..classes).filter(|&c| c != label).collect();
        let gt = scores[[q, label]];
        let mut total = 0usize;
        let mut hits = 0usize;
        let k = n_way - 1;
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let stronger = combo
                .iter()
                .filter(|&&i| scores[[q, others[i]]] > gt)
                .count();
            total += 1;
            if stronger < top_k {
                hits += 1;
            }
            // next combination
            let mut i = k;
            loop {
                if i == 0 {
                    return hits as f64 / total as f64;
                }
                i -= 1;
                if combo[i] != i + others.len() - k {
                    combo[i] += 1;
                    for j in i + 1..k {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn perfect_scores_hit_every_trial() {
        // diagonal dominance: each query's own class wins outright
        let scores = array![[0.9, 0.1, 0.2], [0.0, 0.8, 0.3], [0.1, 0.0, 0.7]];
        let out = nway_topk(scores.view(), &[0, 1, 2], 2, 1, 20, 5).unwrap();
        assert_eq!(out.accuracy, 1.0);
        assert!(out.trials.iter().all(|t| t.hit));
        assert_eq!(out.trials.len(), 3 * 20);
    }

    #[test]
    fn worst_scores_never_hit() {
        let scores = array![[0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];
        let out = nway_topk(scores.view(), &[0, 1], 3, 1, 10, 5).unwrap();
        // full-way: candidate set fixed, one trial per query
        assert_eq!(out.trials.len(), 2);
        assert_eq!(out.accuracy, 0.0);
    }

    #[test]
    fn ties_favor_the_true_class() {
        let scores = array![[0.5, 0.5, 0.5]];
        let out = nway_topk(scores.view(), &[0], 3, 1, 1, 5).unwrap();
        assert_eq!(out.accuracy, 1.0);
        // strictly greater distractor still wins
        let scores = array![[0.5, 0.6, 0.5]];
        let out = nway_topk(scores.view(), &[0], 3, 1, 1, 5).unwrap();
        assert_eq!(out.accuracy, 0.0);
        // but top-2 recovers it
        let out = nway_topk(scores.view(), &[0], 3, 2, 1, 5).unwrap();
        assert_eq!(out.accuracy, 1.0);
    }

    #[test]
    fn sampled_accuracy_matches_exhaustive_expectation() {
        // 5 classes; the true class beats two distractors and loses to two.
        // With N=3 the exact hit rate enumerates C(4,2)=6 subsets.
        let scores = array![[0.5, 0.2, 0.9, 0.1, 0.8]];
        let expect = exhaustive(&scores, 0, 0, 3, 1);
        // subsets containing neither class 2 nor class 4: choose 2 of {1,3} = 1 of 6
        assert!((expect - 1.0 / 6.0).abs() < 1e-12);
        let out = nway_topk(scores.view(), &[0], 3, 1, 6000, 77).unwrap();
        assert!(
            (out.accuracy - expect).abs() < 0.02,
            "sampled {} vs exact {expect}",
            out.accuracy
        );
    }

    #[test]
    fn exhaustive_oracle_agrees_across_small_cases() {
        let scores = array![
            [0.3, 0.7, 0.1, 0.6, 0.2],
            [0.9, 0.4, 0.5, 0.2, 0.6],
            [0.1, 0.2, 0.3, 0.4, 0.5]
        ];
        let labels = [0usize, 0, 2];
        for n_way in 2..=5 {
            for top_k in 1..n_way.min(3) {
                let mut expect = 0.0;
                for (q, &l) in labels.iter().enumerate() {
                    expect += exhaustive(&scores, q, l, n_way, top_k);
                }
                expect /= labels.len() as f64;
                let out =
                    nway_topk(scores.view(), &labels, n_way, top_k, 4000, 13).unwrap();
                assert!(
                    (out.accuracy - expect).abs() < 0.03,
                    "N={n_way} K={top_k}: sampled {} vs exact {expect}",
                    out.accuracy
                );
            }
        }
    }

    #[test]
    fn trials_record_candidates_without_replacement() {
        let scores = Array2::from_shape_fn((4, 6), |(q, c)| ((q * 6 + c) as f64 * 0.37).sin());
        let labels = [0usize, 1, 2, 3];
        let out = nway_topk(scores.view(), &labels, 4, 1, 25, 3).unwrap();
        for t in &out.trials {
            assert_eq!(t.candidates.len(), 4);
            assert_eq!(t.candidates[0], labels[t.query]);
            let mut sorted = t.candidates.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "duplicate candidate in {:?}", t.candidates);
        }
    }

    #[test]
    fn deterministic_and_query_local() {
        let scores = Array2::from_shape_fn((6, 8), |(q, c)| ((q * 13 + c * 5) as f64 * 0.21).cos());
        let labels = [0usize, 1, 2, 3, 4, 5];
        let a = nway_topk(scores.view(), &labels, 3, 1, 50, 9).unwrap();
        let b = nway_topk(scores.view(), &labels, 3, 1, 50, 9).unwrap();
        assert_eq!(a.trials, b.trials);
        // dropping a query leaves the others' trials unchanged
        let sub = scores.slice(ndarray::s![..5, ..]).to_owned();
        let c = nway_topk(sub.view(), &labels[..5], 3, 1, 50, 9).unwrap();
        for (x, y) in c.trials.iter().zip(a.trials.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn invalid_settings_rejected() {
        let scores = array![[0.1, 0.2], [0.3, 0.4]];
        assert!(nway_topk(scores.view(), &[0], 2, 1, 1, 0).is_err()); // label count
        assert!(nway_topk(scores.view(), &[0, 1], 3, 1, 1, 0).is_err()); // n_way > classes
        assert!(nway_topk(scores.view(), &[0, 1], 2, 2, 1, 0).is_err()); // top_k >= n_way
        assert!(nway_topk(scores.view(), &[0, 2], 2, 1, 1, 0).is_err()); // label range
        assert!(nway_topk(scores.view(), &[0, 1], 2, 1, 0, 0).is_err()); // repeats
    }
}
