//! Deterministic 1-d k-means (Lloyd iterations with quantile initialization).

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Outcome of [`kmeans_1d`]: centroids sorted ascending, one cluster index per
/// input value, and the number of Lloyd iterations performed.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 100;

/// Cluster `values` into `k` groups.
///
/// Centroids are initialized at the (i + 0.5)/k quantiles of the sorted
/// values, so the procedure is fully deterministic; the `RngState` parameter
/// is part of the call signature for interface stability but consumes no
/// draws. Ties in assignment break to the lower cluster index. Runs to an
/// assignment fixpoint or 100 iterations.
pub fn kmeans_1d(values: &[f64], k: usize, _rng: RngState) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::input("kmeans_1d: K must be positive"));
    }
    if values.len() < k {
        return Err(Error::input(format!(
            "kmeans_1d: {} values is fewer than K={k}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("kmeans_1d: non-finite input value"));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();

    let mut centroids: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        })
        .collect();

    let assign = |centroids: &[f64], v: f64| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &c) in centroids.iter().enumerate() {
            let d = (v - c).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    let mut assignments: Vec<usize> = values.iter().map(|&v| assign(&centroids, v)).collect();
    let mut iterations = 0usize;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        // Update step: mean of assigned values; empty clusters keep their centroid.
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assignments) {
            sums[a] += v;
            counts[a] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| assign(&centroids, v)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }

    // Relabel so centroids are ascending.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap());
    let mut rank = vec![0usize; k];
    for (new_idx, &old_idx) in order.iter().enumerate() {
        rank[old_idx] = new_idx;
    }
    let centroids_sorted: Vec<f64> = order.iter().map(|&i| centroids[i]).collect();
    let assignments: Vec<usize> = assignments.into_iter().map(|a| rank[a]).collect();

    Ok(KMeansResult { centroids: centroids_sorted, assignments, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> RngState {
        RngState::new(0, 0)
    }

    /// Exhaustive search over contiguous 1-d partitions; optimal for 1-d k-means.
    fn best_contiguous_cost(sorted: &[f64], k: usize) -> f64 {
        fn cost(seg: &[f64]) -> f64 {
            let mean = seg.iter().sum::<f64>() / seg.len() as f64;
            seg.iter().map(|v| (v - mean) * (v - mean)).sum()
        }
        fn rec(sorted: &[f64], k: usize) -> f64 {
            if k == 1 {
                return cost(sorted);
            }
            let mut best = f64::INFINITY;
            // First segment takes i values, at least 1, leaving >= k-1 for the rest.
            for i in 1..=(sorted.len() - (k - 1)) {
                let c = cost(&sorted[..i]) + rec(&sorted[i..], k - 1);
                if c < best {
                    best = c;
                }
            }
            best
        }
        rec(sorted, k)
    }

    #[test]
    fn four_well_separated_pairs() {
        let values = [1.0, 2.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0];
        let result = kmeans_1d(&values, 4, state()).unwrap();
        assert_eq!(result.centroids, vec![1.5, 10.5, 20.5, 30.5]);
        assert_eq!(result.assignments, vec![0, 0, 1, 1, 2, 2, 3, 3]);

        // Confirm optimality against exhaustive contiguous-partition search.
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got_cost: f64 = values
            .iter()
            .zip(&result.assignments)
            .map(|(&v, &a)| (v - result.centroids[a]).powi(2))
            .sum();
        let best = best_contiguous_cost(&sorted, 4);
        assert!((got_cost - best).abs() < 1e-9);
    }

    #[test]
    fn all_equal_single_cluster() {
        let values = [5.0; 6];
        let result = kmeans_1d(&values, 1, state()).unwrap();
        assert_eq!(result.centroids, vec![5.0]);
        assert!(result.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let values = [3.0, 1.0, 2.0];
        let result = kmeans_1d(&values, 3, state()).unwrap();
        assert_eq!(result.centroids, vec![1.0, 2.0, 3.0]);
        assert_eq!(result.assignments, vec![2, 0, 1]);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(kmeans_1d(&[1.0, 2.0], 3, state()).is_err());
        assert!(kmeans_1d(&[1.0, 2.0], 0, state()).is_err());
    }

    #[test]
    fn assignments_map_to_nearest_centroid() {
        let values = [0.0, 0.4, 1.0, 5.0, 5.5, 9.0];
        let result = kmeans_1d(&values, 3, state()).unwrap();
        for (&v, &a) in values.iter().zip(&result.assignments) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &c) in result.centroids.iter().enumerate() {
                let d = (v - c).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(a, best);
        }
    }

    #[test]
    fn permutation_invariant() {
        let values = [4.0, 8.0, 1.0, 2.0, 9.0, 3.0, 7.0, 0.5];
        let base = kmeans_1d(&values, 3, state()).unwrap();
        let perm = [3usize, 0, 6, 1, 7, 2, 4, 5];
        let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let other = kmeans_1d(&permuted, 3, state()).unwrap();
        assert_eq!(base.centroids, other.centroids);
        for (pos, &orig_idx) in perm.iter().enumerate() {
            assert_eq!(other.assignments[pos], base.assignments[orig_idx]);
        }
    }
}
