use alloc::vec::Vec;

#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use super::{check_labels, check_unit_rows, LossOutput};
use crate::error::{shape, Error, Result};
use crate::linalg::{dist, Matrix};

/// Pair distances are clamped to this range before evaluating the
/// hypersphere density, which is singular at 0 and 2.
pub const DWS_DISTANCE_RANGE: (f64, f64) = (0.05, 1.95);

#[derive(Debug, Clone, PartialEq)]
pub struct MarginConfig {
    pub margin: f64,
    pub beta_init: f64,
    pub beta_lr: f64,
    /// Upper clamp on the inverse-density sampling weight.
    pub sampling_lambda: f64,
    /// Probability of replacing a sampled negative with a positive
    /// (0 gives the plain margin loss).
    pub p_switch: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { margin: 0.2, beta_init: 1.2, beta_lr: 5e-4, sampling_lambda: 0.5, p_switch: 0.0 }
    }
}

impl MarginConfig {
    fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.beta_init > 0.0) || !(self.sampling_lambda > 0.0) {
            return Err(Error::InvalidConfig("margin >= 0, beta_init > 0 and lambda > 0 required".into()));
        }
        if !(0.0..=1.0).contains(&self.p_switch) {
            return Err(Error::InvalidConfig("p_switch must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Whether a pair is pulled together or pushed past the class boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRole {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPair {
    pub anchor: usize,
    pub other: usize,
    pub role: PairRole,
}

/// Sampling distribution over the in-batch negatives of `anchor`:
/// `p ∝ min(λ, 1 / (d^{n−2} (1 − d²/4)^{(n−3)/2}))`, with `n` the embedding
/// dimension. Evaluated in log space; returns `(row, probability)` pairs.
pub fn distance_weighted_probabilities(
    unit: &Matrix,
    labels: &[u32],
    anchor: usize,
    lambda: f64,
) -> Result<Vec<(usize, f64)>> {
    check_labels(unit, labels)?;
    let n_dim = unit.cols();
    if n_dim < 3 {
        return Err(Error::InvalidConfig(alloc::format!(
            "distance-weighted sampling needs dimension >= 3, got {n_dim}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig("sampling lambda must be positive".into()));
    }
    let (lo, hi) = DWS_DISTANCE_RANGE;
    let n = n_dim as f64;
    let log_cap = lambda.ln();
    let mut logs: Vec<(usize, f64)> = (0..unit.rows())
        .filter(|&j| labels[j] != labels[anchor])
        .map(|j| {
            let d = dist(unit.row(anchor), unit.row(j)).clamp(lo, hi);
            let log_q = (n - 2.0) * d.ln() + 0.5 * (n - 3.0) * (1.0 - 0.25 * d * d).ln();
            (j, (-log_q).min(log_cap))
        })
        .collect();
    if logs.is_empty() {
        return Err(Error::NoNegatives(anchor));
    }
    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &(_, l)| m.max(l));
    let mut total = 0.0;
    for (_, l) in logs.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    logs.iter_mut().for_each(|(_, w)| *w /= total);
    Ok(logs)
}

/// Draws one negative for `anchor`; with probability `p_switch` a random
/// positive is returned in its place.
pub fn distance_weighted_sample<R: Rng + ?Sized>(
    unit: &Matrix,
    labels: &[u32],
    anchor: usize,
    cfg: &MarginConfig,
    rng: &mut R,
) -> Result<usize> {
    let probs = distance_weighted_probabilities(unit, labels, anchor, cfg.sampling_lambda)?;
    if cfg.p_switch > 0.0 && rng.random::<f64>() < cfg.p_switch {
        let positives: Vec<usize> = (0..labels.len()).filter(|&j| j != anchor && labels[j] == labels[anchor]).collect();
        if !positives.is_empty() {
            return Ok(positives[rng.random_range(0..positives.len())]);
        }
    }
    let mut u = rng.random::<f64>();
    for &(j, p) in &probs {
        if u < p {
            return Ok(j);
        }
        u -= p;
    }
    Ok(probs.last().expect("at least one negative").0)
}

/// One positive (uniform) and one distance-weighted negative per anchor that
/// has both in the batch.
pub fn sample_margin_pairs<R: Rng + ?Sized>(
    unit: &Matrix,
    labels: &[u32],
    cfg: &MarginConfig,
    rng: &mut R,
) -> Result<Vec<SampledPair>> {
    cfg.validate()?;
    check_labels(unit, labels)?;
    let mut pairs = Vec::with_capacity(2 * labels.len());
    for anchor in 0..labels.len() {
        let positives: Vec<usize> = (0..labels.len()).filter(|&j| j != anchor && labels[j] == labels[anchor]).collect();
        let has_negative = labels.iter().any(|&l| l != labels[anchor]);
        if positives.is_empty() || !has_negative {
            continue;
        }
        let pos = positives[rng.random_range(0..positives.len())];
        pairs.push(SampledPair { anchor, other: pos, role: PairRole::Positive });
        let neg = distance_weighted_sample(unit, labels, anchor, cfg, rng)?;
        pairs.push(SampledPair { anchor, other: neg, role: PairRole::Negative });
    }
    Ok(pairs)
}

/// Mean over pairs of `[m + s·(β_{y_anchor} − d)]_+` with `s = −1` for
/// positive and `+1` for negative pairs. Gradients cover the embeddings and
/// the per-class boundaries `β`.
pub fn margin_loss(
    unit: &Matrix,
    labels: &[u32],
    betas: &[f64],
    cfg: &MarginConfig,
    pairs: &[SampledPair],
) -> Result<LossOutput> {
    cfg.validate()?;
    check_labels(unit, labels)?;
    check_unit_rows(unit)?;
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= betas.len()) {
        return Err(shape(alloc::format!("no boundary for class {l} ({} betas)", betas.len())));
    }
    let mut grad = Matrix::zeros(unit.rows(), unit.cols());
    let mut grad_betas = alloc::vec![0.0; betas.len()];
    let mut value = 0.0;
    let mut min_kink = f64::INFINITY;
    if pairs.is_empty() {
        return Ok(LossOutput {
            value,
            grad_embeddings: grad,
            grad_betas: Some(grad_betas),
            min_kink_distance: min_kink,
        });
    }
    let scale = 1.0 / pairs.len() as f64;
    let d_cols = unit.cols();
    for p in pairs {
        let (a, b) = (p.anchor, p.other);
        let class = labels[a] as usize;
        let d = dist(unit.row(a), unit.row(b));
        let sign = match p.role {
            PairRole::Positive => -1.0,
            PairRole::Negative => 1.0,
        };
        let arg = cfg.margin + sign * (betas[class] - d);
        min_kink = min_kink.min(arg.abs());
        if arg <= 0.0 {
            continue;
        }
        value += arg;
        grad_betas[class] += sign * scale;
        if d > 0.0 {
            // ∂arg/∂z_a = −sign · (z_a − z_b) / d
            let coef = -sign * scale / d;
            for k in 0..d_cols {
                let diff = unit[(a, k)] - unit[(b, k)];
                grad[(a, k)] += coef * diff;
                grad[(b, k)] -= coef * diff;
            }
        }
    }
    Ok(LossOutput {
        value: value * scale,
        grad_embeddings: grad,
        grad_betas: Some(grad_betas),
        min_kink_distance: min_kink,
    })
}
