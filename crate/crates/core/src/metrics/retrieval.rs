use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::embed::EmbeddingSet;
use crate::error::{shape, Error, Result};
use crate::linalg::{dot, norm, sq_dist, Matrix};

/// Distance used to rank neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

/// Recall@k and mAP@cutoff, keyed by k / cutoff.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub map_at: BTreeMap<usize, f64>,
}

/// Precomputed state for ranking all other rows against a query row.
struct Ranker<'a> {
    set: &'a EmbeddingSet,
    metric: Metric,
    norms: Vec<f64>,
}

impl<'a> Ranker<'a> {
    fn new(set: &'a EmbeddingSet, metric: Metric) -> Result<Self> {
        let norms = match metric {
            Metric::Euclidean => Vec::new(),
            Metric::Cosine => {
                let norms: Vec<f64> = set.data().row_iter().map(norm).collect();
                if let Some(i) = norms.iter().position(|&n| n <= crate::embed::ZERO_NORM_TOL) {
                    return Err(Error::DegenerateRow(i));
                }
                norms
            }
        };
        Ok(Self { set, metric, norms })
    }

    fn distance(&self, q: usize, j: usize) -> f64 {
        let (a, b) = (self.set.row(q), self.set.row(j));
        match self.metric {
            // squared distance ranks identically to the distance itself
            Metric::Euclidean => sq_dist(a, b),
            Metric::Cosine => 1.0 - dot(a, b) / (self.norms[q] * self.norms[j]),
        }
    }

    /// The `depth` nearest rows to `q`, self excluded, ties by row index.
    fn nearest(&self, q: usize, depth: usize, scratch: &mut Vec<(f64, usize)>) -> usize {
        let n = self.set.len();
        scratch.clear();
        scratch.extend((0..n).filter(|&j| j != q).map(|j| (self.distance(q, j), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let depth = depth.min(scratch.len());
        if depth < scratch.len() && depth > 0 {
            scratch.select_nth_unstable_by(depth - 1, cmp);
            scratch.truncate(depth);
        }
        scratch.sort_unstable_by(cmp);
        depth
    }
}

/// Recall@k for every k in `ks` (query excluded from its own neighbour list).
pub fn recall_at_k(set: &EmbeddingSet, ks: &[usize], metric: Metric) -> Result<RetrievalReport> {
    retrieval_report(set, ks, &[], metric)
}

/// mAP truncated at `cutoff`, averaged over queries that have at least one
/// same-class partner.
pub fn map_at(set: &EmbeddingSet, cutoff: usize, metric: Metric) -> Result<f64> {
    let report = retrieval_report(set, &[], &[cutoff], metric)?;
    Ok(report.map_at[&cutoff])
}

/// Computes every requested recall and mAP value from a single ranking pass.
pub fn retrieval_report(
    set: &EmbeddingSet,
    ks: &[usize],
    map_cutoffs: &[usize],
    metric: Metric,
) -> Result<RetrievalReport> {
    let n = set.len();
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::InvalidK { k, n });
        }
    }
    if !map_cutoffs.is_empty() {
        if n < 2 {
            return Err(Error::InsufficientData("mAP needs at least two samples".into()));
        }
        if let Some(&c) = map_cutoffs.iter().find(|&&c| c == 0) {
            return Err(Error::InvalidK { k: c, n });
        }
    }
    let ranker = Ranker::new(set, metric)?;
    let labels = set.labels();
    let mut class_sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *class_sizes.entry(l).or_default() += 1;
    }

    let depth = ks.iter().chain(map_cutoffs).copied().max().unwrap_or(0).min(n - 1);
    let mut recall_hits = alloc::vec![0usize; ks.len()];
    let mut ap_sums = alloc::vec![0.0f64; map_cutoffs.len()];
    let mut ap_queries = 0usize;
    let mut scratch = Vec::with_capacity(n);

    for q in 0..n {
        let got = ranker.nearest(q, depth, &mut scratch);
        let relevant: Vec<bool> = scratch[..got].iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        let first_hit = relevant.iter().position(|&r| r);
        for (hits, &k) in recall_hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|p| p < k) {
                *hits += 1;
            }
        }
        let positives = class_sizes[&labels[q]] - 1;
        if positives == 0 || map_cutoffs.is_empty() {
            continue;
        }
        ap_queries += 1;
        for (sum, &cutoff) in ap_sums.iter_mut().zip(map_cutoffs) {
            let len = cutoff.min(n - 1);
            let mut found = 0usize;
            let mut precision_sum = 0.0;
            for (rank, _) in relevant[..len].iter().enumerate().filter(|(_, &r)| r) {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
            *sum += precision_sum / positives.min(cutoff) as f64;
        }
    }

    let mut report = RetrievalReport::default();
    for (&k, &hits) in ks.iter().zip(&recall_hits) {
        report.recall_at.insert(k, hits as f64 / n as f64);
    }
    if !map_cutoffs.is_empty() {
        if ap_queries == 0 {
            return Err(Error::InsufficientData("no query has a same-class partner".into()));
        }
        for (&c, &s) in map_cutoffs.iter().zip(&ap_sums) {
            report.map_at.insert(c, s / ap_queries as f64);
        }
    }
    Ok(report)
}

/// Exact brute-force search: the `k` gallery rows closest to each query row
/// in squared Euclidean distance, nearest first, ties by row index.
pub fn knn(gallery: &Matrix, queries: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if gallery.cols() != queries.cols() {
        return Err(shape(alloc::format!("gallery dim {} vs query dim {}", gallery.cols(), queries.cols())));
    }
    if k == 0 || k > gallery.rows() {
        return Err(Error::InvalidK { k, n: gallery.rows() });
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(gallery.rows());
    let mut out = Vec::with_capacity(queries.rows());
    for q in queries.row_iter() {
        scratch.clear();
        scratch.extend(gallery.row_iter().enumerate().map(|(j, g)| (sq_dist(q, g), j)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(cmp);
        out.push(scratch.iter().map(|p| p.1).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::vec;

    fn line(points: &[f64], labels: &[u32]) -> EmbeddingSet {
        let rows: Vec<[f64; 1]> = points.iter().map(|&p| [p]).collect();
        EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn separated_clusters_recall_one() {
        let set = line(&[0.0, 0.1, 10.0, 10.1], &[0, 0, 1, 1]);
        let r = recall_at_k(&set, &[1], Metric::Euclidean).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
        assert_eq!(map_at(&set, 1000, Metric::Euclidean).unwrap(), 1.0);
    }

    #[test]
    fn alternating_points_recall_zero() {
        let set = line(&[0.0, 1.0, 2.0, 3.0], &[0, 1, 0, 1]);
        let r = recall_at_k(&set, &[1, 2], Metric::Euclidean).unwrap();
        assert_eq!(r.recall_at[&1], 0.0);
        // from 0 the 2 nearest are {1, 2}; 2 shares the label
        assert!(r.recall_at[&2] > 0.0);
    }

    #[test]
    fn knn_orders_by_distance() {
        let g = Matrix::from_rows(&[[0.0], [3.0], [1.0], [-1.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.1], [2.9]]).unwrap();
        assert_eq!(knn(&g, &q, 3).unwrap(), [[0, 2, 3], [1, 2, 0]]);
        assert!(knn(&g, &q, 5).is_err());
    }

    #[test]
    fn invalid_k() {
        let set = line(&[0.0, 1.0], &[0, 0]);
        assert_eq!(recall_at_k(&set, &[2], Metric::Euclidean), Err(Error::InvalidK { k: 2, n: 2 }));
        assert!(recall_at_k(&set, &[0], Metric::Euclidean).is_err());
        let single = line(&[0.0], &[0]);
        assert!(matches!(map_at(&single, 10, Metric::Euclidean), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn single_positive_ranked_first() {
        // query 0's only positive is its nearest neighbour
        let set = line(&[0.0, 0.5, 10.0, 11.0, 12.0, 13.0], &[0, 0, 1, 1, 1, 1]);
        assert_eq!(map_at(&set, 1000, Metric::Euclidean).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_row_index() {
        // rows 1 and 2 are equidistant from row 0; row 1 (other class) wins
        let set = line(&[0.0, 1.0, -1.0], &[0, 1, 0]);
        let r = recall_at_k(&set, &[1], Metric::Euclidean).unwrap();
        // query 0 -> row 1 (miss); query 1 -> row 0 (miss); query 2 -> row 0 (hit)
        assert!((r.recall_at[&1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_ignores_scale() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [10.0, 1.0], [0.0, 1.0], [1.0, 20.0]]).unwrap();
        let set = EmbeddingSet::new(m, vec![0, 0, 1, 1]).unwrap();
        let r = recall_at_k(&set, &[1], Metric::Cosine).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
    }
}
