//! Metric-learning objectives and the multiscale self-distillation loss.
//!
//! Every objective returns its value together with analytic gradients.
//! Sampling and mining are split from evaluation ([`BaseObjective::mine`]
//! vs [`BaseObjective::evaluate`]) so that the selected pairs can be frozen,
//! which is what the gradients assume anyway.

mod distill;
mod margin;
mod multisim;

use alloc::vec::Vec;

use rand::Rng;

pub use distill::{pool_avg_max, row_softmax_kl, s2sd_loss, KlTerm, MiningSource, S2sdConfig, S2sdInputs, S2sdOutput};
pub use margin::{
    distance_weighted_probabilities, distance_weighted_sample, margin_loss, sample_margin_pairs, MarginConfig,
    PairRole, SampledPair, DWS_DISTANCE_RANGE,
};
pub use multisim::{multisim_loss, multisim_loss_masked, multisim_mask, MultisimConfig, MultisimMask};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Unit-norm tolerance for inputs that must be L2-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Value and gradients of a pair-based objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Matrix,
    /// Gradient w.r.t. the per-class margin boundaries (margin loss only).
    pub grad_betas: Option<Vec<f64>>,
    /// Smallest distance of any hinge argument from its kink; infinite for
    /// smooth objectives.
    pub min_kink_distance: f64,
}

/// The DML criterion applied to the reference space and to every target branch.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseObjective {
    Margin(MarginConfig),
    Multisim(MultisimConfig),
}

/// Pairs or masks selected for one evaluation of a [`BaseObjective`].
#[derive(Debug, Clone, PartialEq)]
pub enum Mining {
    Pairs(Vec<SampledPair>),
    Mask(MultisimMask),
}

impl BaseObjective {
    pub fn mine<R: Rng + ?Sized>(&self, unit: &Matrix, labels: &[u32], rng: &mut R) -> Result<Mining> {
        match self {
            BaseObjective::Margin(cfg) => Ok(Mining::Pairs(sample_margin_pairs(unit, labels, cfg, rng)?)),
            BaseObjective::Multisim(cfg) => Ok(Mining::Mask(multisim_mask(unit, labels, cfg)?)),
        }
    }

    /// `betas` is only read by the margin loss.
    pub fn evaluate(&self, unit: &Matrix, labels: &[u32], betas: &[f64], mining: &Mining) -> Result<LossOutput> {
        match (self, mining) {
            (BaseObjective::Margin(cfg), Mining::Pairs(pairs)) => margin_loss(unit, labels, betas, cfg, pairs),
            (BaseObjective::Multisim(cfg), Mining::Mask(mask)) => multisim_loss_masked(unit, labels, cfg, mask),
            _ => Err(Error::InvalidState("mining result does not match the objective".into())),
        }
    }

    /// Initial learnable parameters for `num_classes` class ids.
    pub fn initial_betas(&self, num_classes: usize) -> Vec<f64> {
        match self {
            BaseObjective::Margin(cfg) => alloc::vec![cfg.beta_init; num_classes],
            BaseObjective::Multisim(_) => Vec::new(),
        }
    }

    pub fn beta_lr(&self) -> f64 {
        match self {
            BaseObjective::Margin(cfg) => cfg.beta_lr,
            BaseObjective::Multisim(_) => 0.0,
        }
    }
}

pub(crate) fn check_unit_rows(m: &Matrix) -> Result<()> {
    for (row, r) in m.row_iter().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row, norm: n });
        }
    }
    Ok(())
}

pub(crate) fn check_labels(m: &Matrix, labels: &[u32]) -> Result<()> {
    if m.rows() != labels.len() {
        return Err(crate::error::shape(alloc::format!("{} rows but {} labels", m.rows(), labels.len())));
    }
    Ok(())
}

/// Backpropagates through row-wise L2 normalization `z = x / ‖x‖`.
pub fn normalize_backward(raw: &Matrix, unit: &Matrix, grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let n = norm(raw.row(i));
        let z = unit.row(i);
        let g = grad_unit.row(i);
        let zg = dot(z, g);
        for ((o, &gk), &zk) in out.row_mut(i).iter_mut().zip(g).zip(z) {
            *o = (gk - zk * zg) / n;
        }
    }
    out
}

/// Backpropagates `S = Z·Zᵀ`: returns `(G + Gᵀ)·Z`.
pub fn gram_backward(unit: &Matrix, grad_gram: &Matrix) -> Matrix {
    let n = unit.rows();
    let mut sym = grad_gram.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = grad_gram[(i, j)] + grad_gram[(j, i)];
        }
    }
    sym.matmul(unit).expect("gram gradient is n×n")
}
