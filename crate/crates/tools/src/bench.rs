//! Wall-clock timing of exact k-NN search over synthetic unit vectors.

use std::time::Instant;

use dml_core::embed::normalize_rows;
use dml_core::metrics::knn;
use dml_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    /// Gallery size.
    pub n: usize,
    pub dims: Vec<usize>,
    /// Queries per repetition, drawn as the first rows of the gallery.
    pub queries: usize,
    pub k: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { n: 250_000, dims: vec![32, 64, 128], queries: 100, k: 10, repetitions: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub dim: usize,
    /// Median over repetitions.
    pub seconds: f64,
    pub runs: Vec<f64>,
}

/// Rows drawn from a standard Gaussian and L2-normalized.
pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(normalize_rows(&Matrix::from_vec(n, dim, data)?)?)
}

pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.n == 0 || spec.dims.is_empty() || spec.repetitions == 0 || spec.queries == 0 {
        return Err(ToolError::Usage("n, dims, queries and repetitions must be non-empty / positive".into()));
    }
    if spec.dims.contains(&0) {
        return Err(ToolError::Usage("dims must be positive".into()));
    }
    let q = spec.queries.min(spec.n);
    let mut rows = Vec::with_capacity(spec.dims.len());
    for &dim in &spec.dims {
        let gallery = unit_vectors(spec.n, dim, spec.seed ^ dim as u64)?;
        let idx: Vec<usize> = (0..q).collect();
        let queries = gallery.select_rows(&idx);
        let mut runs = Vec::with_capacity(spec.repetitions);
        for _ in 0..spec.repetitions {
            let start = Instant::now();
            let hits = knn(&gallery, &queries, spec.k.min(spec.n))?;
            runs.push(start.elapsed().as_secs_f64());
            std::hint::black_box(hits);
        }
        rows.push(BenchRow { dim, seconds: median(&runs), runs });
    }
    Ok(rows)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dml_core::linalg::norm;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn vectors_are_unit_and_seeded() {
        let a = unit_vectors(20, 5, 3).unwrap();
        assert!(a.row_iter().all(|r| (norm(r) - 1.0).abs() < 1e-12));
        assert_eq!(a, unit_vectors(20, 5, 3).unwrap());
    }

    #[test]
    fn small_run_reports_every_dim() {
        let spec = BenchSpec { n: 200, dims: vec![4, 8], queries: 10, k: 3, repetitions: 3, seed: 1 };
        let rows = run(&spec).unwrap();
        assert_eq!(rows.iter().map(|r| r.dim).collect::<Vec<_>>(), [4, 8]);
        assert!(rows.iter().all(|r| r.runs.len() == 3 && r.seconds >= 0.0));
    }
}
