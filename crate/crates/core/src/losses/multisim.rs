use alloc::vec::Vec;

use super::{check_labels, check_unit_rows, LossOutput};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct MultisimConfig {
    /// Positive-pair scale.
    pub alpha: f64,
    /// Negative-pair scale.
    pub beta: f64,
    /// Similarity offset.
    pub lambda: f64,
    /// Mining band.
    pub epsilon: f64,
}

impl Default for MultisimConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 40.0, lambda: 0.5, epsilon: 0.1 }
    }
}

/// Per-anchor positives and negatives that survive mining.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultisimMask {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl MultisimMask {
    pub fn kept_pairs(&self) -> usize {
        self.positives.iter().chain(&self.negatives).map(Vec::len).sum()
    }
}

/// Hard-pair mining on cosine similarities: a negative is kept when it is
/// more similar than the least similar positive minus `ε`; a positive is kept
/// when it is less similar than the most similar negative plus `ε`. If an
/// anchor has no negatives (or no positives) the other side is kept whole.
pub fn multisim_mask(unit: &Matrix, labels: &[u32], cfg: &MultisimConfig) -> Result<MultisimMask> {
    check_labels(unit, labels)?;
    let n = unit.rows();
    let mut mask = MultisimMask { positives: Vec::with_capacity(n), negatives: Vec::with_capacity(n) };
    for i in 0..n {
        let sims: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, dot(unit.row(i), unit.row(j)))).collect();
        let (pos, neg): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            sims.into_iter().partition(|&(j, _)| labels[j] == labels[i]);
        let min_pos = pos.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let keep_pos = pos.iter().filter(|&&(_, s)| neg.is_empty() || s - cfg.epsilon < max_neg).map(|p| p.0).collect();
        let keep_neg = neg.iter().filter(|&&(_, s)| pos.is_empty() || s + cfg.epsilon > min_pos).map(|p| p.0).collect();
        mask.positives.push(keep_pos);
        mask.negatives.push(keep_neg);
    }
    Ok(mask)
}

/// Multi-similarity loss with mining applied.
pub fn multisim_loss(unit: &Matrix, labels: &[u32], cfg: &MultisimConfig) -> Result<LossOutput> {
    let mask = multisim_mask(unit, labels, cfg)?;
    multisim_loss_masked(unit, labels, cfg, &mask)
}

/// Anchor-averaged
/// `(1/α)·log(1 + Σ_P e^{−α(s−λ)}) + (1/β)·log(1 + Σ_N e^{β(s−λ)})`
/// over a fixed mining mask; the mask carries no gradient.
pub fn multisim_loss_masked(
    unit: &Matrix,
    labels: &[u32],
    cfg: &MultisimConfig,
    mask: &MultisimMask,
) -> Result<LossOutput> {
    check_labels(unit, labels)?;
    check_unit_rows(unit)?;
    if !(cfg.alpha > 0.0 && cfg.beta > 0.0) {
        return Err(Error::InvalidConfig("multisimilarity alpha and beta must be positive".into()));
    }
    let n = unit.rows();
    if mask.positives.len() != n || mask.negatives.len() != n {
        return Err(crate::error::shape("mining mask does not match the batch"));
    }
    let scale = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, unit.cols());
    let mut value = 0.0;
    let mut coefs: Vec<(usize, f64)> = Vec::new();
    for i in 0..n {
        coefs.clear();
        let pos_exp: Vec<(usize, f64)> = mask.positives[i]
            .iter()
            .map(|&j| (j, (-cfg.alpha * (dot(unit.row(i), unit.row(j)) - cfg.lambda)).exp()))
            .collect();
        let neg_exp: Vec<(usize, f64)> = mask.negatives[i]
            .iter()
            .map(|&k| (k, (cfg.beta * (dot(unit.row(i), unit.row(k)) - cfg.lambda)).exp()))
            .collect();
        if !pos_exp.is_empty() {
            let sum: f64 = pos_exp.iter().map(|e| e.1).sum();
            value += sum.ln_1p() / cfg.alpha;
            coefs.extend(pos_exp.iter().map(|&(j, e)| (j, -e / (1.0 + sum))));
        }
        if !neg_exp.is_empty() {
            let sum: f64 = neg_exp.iter().map(|e| e.1).sum();
            value += sum.ln_1p() / cfg.beta;
            coefs.extend(neg_exp.iter().map(|&(k, e)| (k, e / (1.0 + sum))));
        }
        // s_ij = z_i · z_j
        for &(j, c) in &coefs {
            let c = c * scale;
            for k in 0..unit.cols() {
                let zi = unit[(i, k)];
                let zj = unit[(j, k)];
                grad[(i, k)] += c * zj;
                grad[(j, k)] += c * zi;
            }
        }
    }
    Ok(LossOutput { value: value * scale, grad_embeddings: grad, grad_betas: None, min_kink_distance: f64::INFINITY })
}
