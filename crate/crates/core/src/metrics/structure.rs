use alloc::vec::Vec;

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dist, singular_values, Matrix};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

pub const DEFAULT_SKIP_FIRST: usize = 10;
const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Density {
    pub pi_intra: f64,
    pub pi_inter: f64,
    pub pi_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureReport {
    pub pi_intra: f64,
    pub pi_inter: f64,
    pub pi_ratio: f64,
    pub spectral_decay: f64,
}

/// Mean within-class pair distance over mean class-center distance.
///
/// Within-class distances are pooled over all classes and divided by the
/// total number of within-class pairs.
pub fn density(set: &EmbeddingSet) -> Result<Density> {
    let idx = set.class_index();
    if idx.num_classes() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    if let Some(p) = idx.row_groups.iter().position(|g| g.len() < 2) {
        return Err(Error::SingletonClass(idx.class_ids[p]));
    }
    let mut intra_sum = 0.0;
    let mut intra_pairs = 0usize;
    for rows in &idx.row_groups {
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                intra_sum += dist(set.row(i), set.row(j));
            }
        }
        intra_pairs += rows.len() * (rows.len() - 1) / 2;
    }
    let means = &idx.class_means;
    let mut inter_sum = 0.0;
    let mut inter_pairs = 0usize;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            inter_sum += dist(&means[a], &means[b]);
            inter_pairs += 1;
        }
    }
    let pi_intra = intra_sum / intra_pairs as f64;
    let pi_inter = inter_sum / inter_pairs as f64;
    if pi_inter <= 0.0 {
        return Err(Error::NumericalFailure("all class centers coincide".into()));
    }
    Ok(Density { pi_intra, pi_inter, pi_ratio: pi_intra / pi_inter })
}

/// KL divergence from the uniform distribution to the normalized singular
/// value spectrum of the mean-centered data, after dropping the
/// `skip_first` largest singular values.
pub fn spectral_decay(set: &EmbeddingSet, skip_first: usize) -> Result<f64> {
    let data = set.data();
    let (n, d) = data.shape();
    if skip_first >= n.min(d) {
        return Err(Error::InvalidConfig(alloc::format!(
            "skip_first={skip_first} leaves no singular values (min(N, D) = {})",
            n.min(d)
        )));
    }
    let centered = center_columns(data);
    let sv = singular_values(&centered);
    let largest = sv.first().copied().unwrap_or(0.0);
    let tail: Vec<f64> = sv[skip_first..].to_vec();
    let total: f64 = tail.iter().sum();
    if largest <= 0.0 || total <= SPECTRUM_FLOOR * largest {
        return Err(Error::DegenerateSpectrum);
    }
    let u = 1.0 / tail.len() as f64;
    Ok(tail.iter().map(|s| u * (u / (s / total).max(SPECTRUM_FLOOR)).ln()).sum())
}

pub(crate) fn center_columns(data: &Matrix) -> Matrix {
    let (n, d) = data.shape();
    let mut mean = alloc::vec![0.0; d];
    for row in data.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = data.clone();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

pub fn structure_report(set: &EmbeddingSet, skip_first: usize) -> Result<StructureReport> {
    let d = density(set)?;
    Ok(StructureReport {
        pi_intra: d.pi_intra,
        pi_inter: d.pi_inter,
        pi_ratio: d.pi_ratio,
        spectral_decay: spectral_decay(set, skip_first)?,
    })
}
