//! Exact nearest neighbours and recall.

use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::common::sq_dist_slice;
use crate::error::{check_dim, Error, Result};

/// The `k` smallest of `dist(0..n)`, ascending, ties by ascending id.
pub fn top_k_by(n: usize, k: usize, dist: impl Fn(u32) -> f64) -> Vec<u32> {
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<(Key, u32)> = BinaryHeap::with_capacity(k + 1);
    for id in 0..n as u32 {
        let entry = (Key(dist(id)), id);
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().expect("k > 0") {
            *heap.peek_mut().expect("k > 0") = entry;
        }
    }
    heap.into_sorted_vec().into_iter().map(|(_, id)| id).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Exact top-`k` of `base` by squared Euclidean distance to `q`.
pub fn brute_force_knn(base: &[Vec<f64>], q: &[f64], k: usize) -> Result<Vec<u32>> {
    if k > base.len() {
        return Err(Error::InvalidParameter(format!("k={k} exceeds n={}", base.len())));
    }
    if let Some(first) = base.first() {
        check_dim(first.len(), q.len())?;
    }
    Ok(top_k_by(base.len(), k, |id| sq_dist_slice(&base[id as usize], q)))
}

/// Ground truth for a query batch, computed in parallel.
pub fn ground_truth(base: &[Vec<f64>], queries: &[Vec<f64>], k: usize) -> Result<Vec<Vec<u32>>> {
    queries.par_iter().map(|q| brute_force_knn(base, q, k)).collect()
}

/// `|result ∩ truth| / k`, counting each result id at most once.
pub fn recall_at_k(result: &[u32], truth: &[u32], k: usize) -> Result<f64> {
    if k == 0 || truth.len() != k {
        return Err(Error::InvalidParameter(format!(
            "truth has {} ids for k={k}",
            truth.len()
        )));
    }
    let mut seen: Vec<u32> = result.iter().take(k).copied().collect();
    seen.sort_unstable();
    seen.dedup();
    let hits = seen.iter().filter(|id| truth.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

/// Mean recall over a batch.
pub fn mean_recall(results: &[Vec<u32>], truth: &[Vec<u32>], k: usize) -> Result<f64> {
    check_dim(truth.len(), results.len())?;
    if results.is_empty() {
        return Err(Error::Empty("no queries"));
    }
    let mut sum = 0.0;
    for (r, t) in results.iter().zip(truth) {
        sum += recall_at_k(r, &t[..k.min(t.len())], k)?;
    }
    Ok(sum / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::common::SeededRng;

    #[test]
    fn one_dimensional_example() {
        let base = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(brute_force_knn(&base, &[0.6], 2).unwrap(), vec![1, 0]);
        assert_eq!(brute_force_knn(&base, &[0.6], 3).unwrap(), vec![1, 0, 2]);
        assert!(brute_force_knn(&base, &[0.6], 4).is_err());
    }

    #[test]
    fn ties_by_id() {
        let base = vec![vec![1.0], vec![-1.0], vec![1.0], vec![0.0]];
        assert_eq!(brute_force_knn(&base, &[0.0], 3).unwrap(), vec![3, 0, 1]);
    }

    #[test]
    fn agrees_with_quadratic_scan() {
        let mut rng = SeededRng::new(21);
        let base: Vec<Vec<f64>> = (0..1000).map(|_| (0..64).map(|_| rng.gaussian()).collect()).collect();
        for _ in 0..20 {
            let q: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
            let mut scored: Vec<(f64, u32)> = base
                .iter()
                .enumerate()
                .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i as u32))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<u32> = scored.iter().take(10).map(|x| x.1).collect();
            assert_eq!(brute_force_knn(&base, &q, 10).unwrap(), expected);
        }
    }

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 2, 9], &[1, 2, 3], 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&[3, 2, 1], &[1, 2, 3], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[4, 5, 6], &[1, 2, 3], 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[1, 1, 1], &[1, 2, 3], 3).unwrap(), 1.0 / 3.0);
        assert!(recall_at_k(&[1], &[1, 2], 3).is_err());
    }
}
