use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::EmbeddingSet;
use crate::error::{shape, Error, Result};
use crate::linalg::{sq_dist, Matrix};

pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// NMI between the assignments and the set's labels.
    pub nmi: f64,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached.
pub fn kmeans(set: &EmbeddingSet, k: usize, seed: u64, max_iters: usize) -> Result<ClusterReport> {
    let n = set.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let data = set.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(data, k, &mut rng);

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (best, d) = nearest_center(data.row(i), &centers);
            inertia += d;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        update_centers(data, &assignments, &mut centers);
    }
    let inertia = (0..n).map(|i| sq_dist(data.row(i), centers.row(assignments[i]))).sum();
    let nmi = nmi(&assignments, set.labels())?;
    Ok(ClusterReport { nmi, assignments, inertia, inertia_history: history, iterations, converged })
}

fn plus_plus_init<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = data.rows();
    let mut centers = Matrix::zeros(k, data.cols());
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.unwrap_or(0)
        } else {
            // all remaining points coincide with a center: take any unused one
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.row_mut(c).copy_from_slice(data.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centers
}

fn nearest_center(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.row_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn update_centers(data: &Matrix, assignments: &[usize], centers: &mut Matrix) {
    let k = centers.rows();
    let mut sums = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        // empty clusters keep their previous center
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
}

/// Normalized mutual information `2·I(A;B) / (H(A) + H(B))`, natural logs.
///
/// Returns 0 when both partitions are trivial (both entropies zero).
pub fn nmi<A: Copy + Ord, B: Copy + Ord>(assignments: &[A], labels: &[B]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(shape("assignment and label sequences differ in length"));
    }
    if assignments.is_empty() {
        return Err(Error::InsufficientData("nmi of an empty partition".into()));
    }
    let n = assignments.len() as f64;
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut left: BTreeMap<A, usize> = BTreeMap::new();
    let mut right: BTreeMap<B, usize> = BTreeMap::new();
    for (&a, &b) in assignments.iter().zip(labels) {
        *joint.entry((a, b)).or_default() += 1;
        *left.entry(a).or_default() += 1;
        *right.entry(b).or_default() += 1;
    }
    let entropy = |counts: &mut dyn Iterator<Item = usize>| -> f64 {
        counts
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&mut left.values().copied());
    let hb = entropy(&mut right.values().copied());
    if ha + hb <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let pab = c as f64 / n;
        let pa = left[&a] as f64 / n;
        let pb = right[&b] as f64 / n;
        mi += pab * (pab / (pa * pb)).ln();
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> EmbeddingSet {
        let rows = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [50.0, 50.0], [50.1, 50.0], [50.0, 50.1]];
        EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), vec![0, 0, 0, 1, 1, 1]).unwrap()
    }

    #[test]
    fn two_blobs_are_separated() {
        let r = kmeans(&blobs(), 2, 4, DEFAULT_MAX_ITERS).unwrap();
        let a = &r.assignments;
        assert!(a[0] == a[1] && a[1] == a[2]);
        assert!(a[3] == a[4] && a[4] == a[5]);
        assert_ne!(a[0], a[3]);
        assert!((r.nmi - 1.0).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let set = blobs();
        let r = kmeans(&set, set.len(), 1, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(matches!(kmeans(&set, 7, 1, 10), Err(Error::InvalidK { k: 7, n: 6 })));
    }

    #[test]
    fn nmi_edge_cases() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }
}
