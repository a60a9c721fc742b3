//! Gaussian summaries of embedding sets and the Frechet distance between them.

use alloc::format;
use alloc::vec::Vec;

use crate::embed::EmbeddingSet;
use crate::error::{shape, Error, Result};
use crate::linalg::{sym_apply, sym_eigen, Matrix};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

/// Asymmetry allowed in covariance inputs, relative to `max(1, max|a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `EIG_CLAMP_REL · λ_max` are treated as zero.
pub const EIG_CLAMP_REL: f64 = 1e-8;
/// Negative distances down to this value are rounding noise and floored to 0.
pub const NEGATIVE_FLOOR: f64 = -1e-6;

/// Mean and unbiased covariance of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn summarize(set: &EmbeddingSet) -> Result<GaussianSummary> {
    summarize_rows(set.data(), None)
}

/// Summary of a subset of rows (all rows when `rows` is `None`).
pub fn summarize_rows(data: &Matrix, rows: Option<&[usize]>) -> Result<GaussianSummary> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..data.rows()).collect();
            &all
        }
    };
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("covariance needs at least 2 samples, got {n}")));
    }
    let d = data.cols();
    let mut mean = alloc::vec![0.0; d];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = alloc::vec![0.0; d];
    for &r in rows {
        for ((c, v), m) in centered.iter_mut().zip(data.row(r)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let inv = 1.0 / (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * inv;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianSummary { mean, cov, n })
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let asym = a.max_asymmetry().ok_or_else(|| shape("covariance must be square"))?;
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn clamp_floor(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    EIG_CLAMP_REL * max
}

/// `Tr((A·B)^{1/2})`, computed as `Σ √λ_i(S·B·S)` with `S = A^{1/2}`.
pub fn trace_sqrt_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape(format!("covariance shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    check_symmetric(a)?;
    check_symmetric(b)?;
    let ea = sym_eigen(a)?;
    let floor_a = clamp_floor(&ea.values);
    let sqrt_a = sym_apply(&ea, |l| if l > floor_a { l.sqrt() } else { 0.0 });
    let m = sqrt_a.matmul(b)?.matmul(&sqrt_a)?;
    let em = sym_eigen(&m)?;
    let floor_m = clamp_floor(&em.values);
    Ok(em.values.iter().filter(|&&l| l > floor_m).map(|l| l.sqrt()).sum())
}

/// `‖μ_p − μ_q‖² + Tr(Σ_p) + Tr(Σ_q) − 2·Tr((Σ_p Σ_q)^{1/2})`
pub fn frechet_distance(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    if p.dim() != q.dim() || p.cov.shape() != q.cov.shape() {
        return Err(shape(format!("summaries have dimensions {} and {}", p.dim(), q.dim())));
    }
    if p.mean == q.mean && p.cov == q.cov {
        return Ok(0.0);
    }
    let mean_term: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = mean_term + p.cov.trace() + q.cov.trace() - 2.0 * trace_sqrt_product(&p.cov, &q.cov)?;
    if value >= 0.0 {
        Ok(value)
    } else if value > NEGATIVE_FLOOR {
        Ok(0.0)
    } else {
        Err(Error::NumericalFailure(format!("Frechet distance evaluated to {value:e}")))
    }
}

/// Frechet distance between two embedding sets.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    frechet_distance(&summarize(a)?, &summarize(b)?)
}
