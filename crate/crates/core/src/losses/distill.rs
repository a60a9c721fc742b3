use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::RngCore;

use super::{gram_backward, normalize_backward, BaseObjective, Mining};
use crate::embed::normalize_rows;
use crate::error::{shape, Error, Result};
use crate::linalg::Matrix;
use crate::nn::{MlpGrads, MlpHead};

/// Value of a row-softmax KL term and its gradients with respect to both
/// similarity matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub value: f64,
    pub grad_a: Matrix,
    /// Only used when the target side is not detached.
    pub grad_b: Matrix,
}

/// `Σ_i KL(softmax(B_i/T) ‖ softmax(A_i/T)) · T² / N`.
pub fn row_softmax_kl(a: &Matrix, b: &Matrix, temperature: f64) -> Result<KlTerm> {
    let (n, m) = a.shape();
    if n != m || a.shape() != b.shape() {
        return Err(shape(format!("similarity matrices {:?} and {:?}", a.shape(), b.shape())));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let t = temperature;
    let mut grad_a = Matrix::zeros(n, n);
    let mut grad_b = Matrix::zeros(n, n);
    let mut value = 0.0;
    let mut log_p = alloc::vec![0.0; n];
    let mut log_q = alloc::vec![0.0; n];
    for i in 0..n {
        log_softmax(a.row(i), t, &mut log_p);
        log_softmax(b.row(i), t, &mut log_q);
        // row KL, also the q-weighted mean of log q − log p
        let mut mean_gap = 0.0;
        for j in 0..n {
            mean_gap += log_q[j].exp() * (log_q[j] - log_p[j]);
        }
        value += mean_gap;
        let ga = grad_a.row_mut(i);
        for j in 0..n {
            ga[j] = (t / n as f64) * (log_p[j].exp() - log_q[j].exp());
        }
        let gb = grad_b.row_mut(i);
        for j in 0..n {
            let q = log_q[j].exp();
            gb[j] = (t / n as f64) * q * ((log_q[j] - log_p[j]) - mean_gap);
        }
    }
    Ok(KlTerm { value: value * t * t / n as f64, grad_a, grad_b })
}

fn log_softmax(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let lse = max + row.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v / t - lse;
    }
}

/// Global average pooling plus global max pooling of `channels × positions`
/// maps, one output row per map.
pub fn pool_avg_max(maps: &[Matrix]) -> Result<Matrix> {
    let first = maps.first().ok_or_else(|| shape("no feature maps"))?;
    let (c, p) = first.shape();
    if p == 0 {
        return Err(shape("feature maps have no positions"));
    }
    let mut out = Matrix::zeros(maps.len(), c);
    for (i, map) in maps.iter().enumerate() {
        if map.shape() != (c, p) {
            return Err(shape(format!("map {i} has shape {:?}, expected {:?}", map.shape(), (c, p))));
        }
        for (ch, o) in out.row_mut(i).iter_mut().enumerate() {
            let r = map.row(ch);
            let avg = r.iter().sum::<f64>() / p as f64;
            let max = r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            *o = avg + max;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2sdConfig {
    /// Distillation weight.
    pub gamma: f64,
    pub temperature: f64,
    /// Output widths of the target branches, ascending.
    pub target_dims: Vec<usize>,
    /// Iterations before feature distillation switches on.
    pub warmup_iters: u64,
    pub use_feature_distill: bool,
    pub detach_targets: bool,
}

impl Default for S2sdConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            temperature: 1.0,
            target_dims: Vec::new(),
            warmup_iters: 0,
            use_feature_distill: false,
            detach_targets: true,
        }
    }
}

impl S2sdConfig {
    pub fn validate(&self, ref_dim: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let mut prev = ref_dim;
        for &d in &self.target_dims {
            if d <= prev {
                return Err(Error::InvalidConfig(format!(
                    "target dims must be ascending and exceed the reference dim {ref_dim}: {:?}",
                    self.target_dims
                )));
            }
            prev = d;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct S2sdInputs<'a> {
    /// Raw (unnormalized) reference embeddings.
    pub ref_embeddings: &'a Matrix,
    /// Per-sample feature vectors fed to the target heads.
    pub features: &'a Matrix,
    pub labels: &'a [u32],
}

/// Where the pairs/masks for the reference space and each branch come from.
pub enum MiningSource<'a> {
    Sample(&'a mut dyn RngCore),
    /// Reference first, then one entry per branch.
    Fixed(&'a [Mining]),
}

impl core::fmt::Debug for MiningSource<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MiningSource::Sample(_) => f.write_str("Sample(..)"),
            MiningSource::Fixed(m) => f.debug_tuple("Fixed").field(&m.len()).finish(),
        }
    }
}

impl MiningSource<'_> {
    fn get(&mut self, idx: usize, base: &BaseObjective, unit: &Matrix, labels: &[u32]) -> Result<Mining> {
        match self {
            MiningSource::Sample(rng) => base.mine(unit, labels, &mut **rng),
            MiningSource::Fixed(m) => Ok(m[idx].clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2sdOutput {
    pub value: f64,
    pub base_loss: f64,
    pub target_losses: Vec<f64>,
    pub distill_terms: Vec<f64>,
    /// `None` while feature distillation is off or warming up.
    pub feature_distill: Option<f64>,
    pub grad_ref: Matrix,
    /// Sum of the per-branch input gradients.
    pub grad_features: Matrix,
    pub branch_feature_grads: Vec<Matrix>,
    pub head_grads: Vec<MlpGrads>,
    /// Part of `head_grads` that comes from the distillation terms alone.
    pub head_distill_grads: Vec<MlpGrads>,
    /// Reference first, then one entry per branch.
    pub beta_grads: Vec<Option<Vec<f64>>>,
    pub minings: Vec<Mining>,
    pub min_kink_distance: f64,
}

impl S2sdOutput {
    pub fn mean_distill(&self) -> Option<f64> {
        if self.distill_terms.is_empty() {
            None
        } else {
            Some(self.distill_terms.iter().sum::<f64>() / self.distill_terms.len() as f64)
        }
    }
}

/// Multiscale self-distillation objective:
/// `(L_ref + mean_b L_b)/2 + γ·mean_b KL(S_ref, S_b)` plus
/// `γ·KL(S_ref, S_feat)` once `iteration ≥ warmup_iters`.
/// With no branches the first part is just `L_ref`.
///
/// `betas` holds the margin boundaries for the reference space followed by
/// one vector per branch (empty vectors for objectives without them).
pub fn s2sd_loss(
    inputs: S2sdInputs<'_>,
    heads: &[MlpHead],
    base: &BaseObjective,
    betas: &[Vec<f64>],
    cfg: &S2sdConfig,
    iteration: i64,
    mut mining: MiningSource<'_>,
) -> Result<S2sdOutput> {
    if iteration < 0 {
        return Err(Error::InvalidState(format!("negative iteration {iteration}")));
    }
    let S2sdInputs { ref_embeddings: raw, features, labels } = inputs;
    let n = raw.rows();
    if labels.len() != n || features.rows() != n {
        return Err(shape(format!("{n} embeddings, {} labels, {} feature rows", labels.len(), features.rows())));
    }
    cfg.validate(raw.cols())?;
    let nb = heads.len();
    if nb != cfg.target_dims.len() {
        return Err(shape(format!("{nb} heads for {} target dims", cfg.target_dims.len())));
    }
    for (b, (h, &d)) in heads.iter().zip(&cfg.target_dims).enumerate() {
        if h.output_dim() != d || h.input_dim() != features.cols() {
            return Err(shape(format!(
                "head {b} maps {} -> {}, expected {} -> {d}",
                h.input_dim(),
                h.output_dim(),
                features.cols()
            )));
        }
    }
    if betas.len() != nb + 1 {
        return Err(shape(format!("{} beta vectors for {} spaces", betas.len(), nb + 1)));
    }
    if let MiningSource::Fixed(m) = &mining {
        if m.len() != nb + 1 {
            return Err(shape(format!("{} fixed minings for {} spaces", m.len(), nb + 1)));
        }
    }
    let feature_on = cfg.use_feature_distill && iteration as u64 >= cfg.warmup_iters;

    let z = normalize_rows(raw)?;
    let m0 = mining.get(0, base, &z, labels)?;
    let base_out = base.evaluate(&z, labels, &betas[0], &m0)?;
    let base_w = if nb == 0 { 1.0 } else { 0.5 };
    let mut grad_z = base_out.grad_embeddings;
    let mut min_kink = base_out.min_kink_distance;
    let mut beta_grads = Vec::with_capacity(nb + 1);
    let mut minings = Vec::with_capacity(nb + 1);
    minings.push(m0);
    if nb > 0 {
        grad_z.scale(base_w);
    }
    beta_grads.push(base_out.grad_betas.map(|mut g| {
        g.iter_mut().for_each(|v| *v *= base_w);
        g
    }));

    let base_smat = if nb > 0 || feature_on { Some(z.gram()) } else { None };
    let mut grad_smat = Matrix::zeros(n, n);
    let mut target_losses = Vec::with_capacity(nb);
    let mut distill_terms = Vec::with_capacity(nb);
    let mut head_grads = Vec::with_capacity(nb);
    let mut head_distill_grads = Vec::with_capacity(nb);
    let mut branch_feature_grads = Vec::with_capacity(nb);
    let mut grad_features = Matrix::zeros(n, features.cols());
    let loss_w = 0.5 / nb.max(1) as f64;
    let dist_w = cfg.gamma / nb.max(1) as f64;

    for (b, head) in heads.iter().enumerate() {
        let (t_raw, cache) = head.forward(features)?;
        let t = normalize_rows(&t_raw)?;
        let mb = mining.get(b + 1, base, &t, labels)?;
        let out = base.evaluate(&t, labels, &betas[b + 1], &mb)?;
        min_kink = min_kink.min(out.min_kink_distance);
        target_losses.push(out.value);
        beta_grads.push(out.grad_betas.map(|mut g| {
            g.iter_mut().for_each(|v| *v *= loss_w);
            g
        }));
        minings.push(mb);

        let kl = row_softmax_kl(base_smat.as_ref().expect("built when branches exist"), &t.gram(), cfg.temperature)?;
        distill_terms.push(kl.value);
        grad_smat.axpy(dist_w, &kl.grad_a);

        let mut up_loss = out.grad_embeddings;
        up_loss.scale(loss_w);
        let up_loss = normalize_backward(&t_raw, &t, &up_loss);
        let up_distill = if cfg.detach_targets {
            Matrix::zeros(n, head.output_dim())
        } else {
            let mut g = kl.grad_b;
            g.scale(dist_w);
            normalize_backward(&t_raw, &t, &gram_backward(&t, &g))
        };
        let grads = if cfg.detach_targets {
            head.backward(&cache, &up_loss)?
        } else {
            let mut total = up_loss;
            total.add_assign(&up_distill);
            head.backward(&cache, &total)?
        };
        head_distill_grads.push(head.backward(&cache, &up_distill)?);
        grad_features.add_assign(&grads.input);
        branch_feature_grads.push(grads.input.clone());
        head_grads.push(grads);
    }

    let mut value = base_w * base_out.value;
    if nb > 0 {
        value += 0.5 * target_losses.iter().sum::<f64>() / nb as f64;
        value += cfg.gamma * distill_terms.iter().sum::<f64>() / nb as f64;
    }
    let mut feature_distill = None;
    if feature_on {
        // features are a fixed teacher: no gradient flows back into them
        let f = normalize_rows(features)?;
        let kl = row_softmax_kl(
            base_smat.as_ref().expect("built when feature distillation is on"),
            &f.gram(),
            cfg.temperature,
        )?;
        value += cfg.gamma * kl.value;
        grad_smat.axpy(cfg.gamma, &kl.grad_a);
        feature_distill = Some(kl.value);
    }
    if base_smat.is_some() {
        grad_z.add_assign(&gram_backward(&z, &grad_smat));
    }
    let grad_ref = normalize_backward(raw, &z, &grad_z);

    Ok(S2sdOutput {
        value,
        base_loss: base_out.value,
        target_losses,
        distill_terms,
        feature_distill,
        grad_ref,
        grad_features,
        branch_feature_grads,
        head_grads,
        head_distill_grads,
        beta_grads,
        minings,
        min_kink_distance: min_kink,
    })
}
