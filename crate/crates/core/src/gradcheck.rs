//! Finite-difference validation of the analytic gradients.
//!
//! Each registered objective draws random `f64` inputs, evaluates its
//! analytic gradient, and compares every input block against central
//! differences. Sampling and mining are drawn once at the base point and then
//! frozen, and trials that land close to a hinge or ReLU kink are redrawn.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::normalize_rows;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::losses::{
    normalize_backward, row_softmax_kl, s2sd_loss, BaseObjective, MarginConfig, Mining, MiningSource, MultisimConfig,
    S2sdConfig, S2sdInputs,
};
use crate::nn::MlpHead;

pub const FD_STEP: f64 = 1e-6;
/// Trials whose hinge arguments come closer than this to zero are redrawn.
pub const HINGE_SLACK: f64 = 1e-3;
/// Trials with a hidden pre-activation closer than this to zero are redrawn.
pub const RELU_SLACK: f64 = 1e-4;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GradObjective {
    LinearRegression,
    Margin,
    Multisim,
    RowSoftmaxKl,
    S2sd,
    MlpMargin,
}

impl GradObjective {
    pub const ALL: [GradObjective; 6] = [
        GradObjective::LinearRegression,
        GradObjective::Margin,
        GradObjective::Multisim,
        GradObjective::RowSoftmaxKl,
        GradObjective::S2sd,
        GradObjective::MlpMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradObjective::LinearRegression => "linear_regression",
            GradObjective::Margin => "margin",
            GradObjective::Multisim => "multisim",
            GradObjective::RowSoftmaxKl => "row_softmax_kl",
            GradObjective::S2sd => "s2sd",
            GradObjective::MlpMargin => "mlp_margin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }
}

/// Worst relative error of one input block over all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub objective: GradObjective,
    pub trials: usize,
    /// Draws rejected for being too close to a kink.
    pub redrawn: usize,
    pub blocks: Vec<BlockError>,
    /// Trials that could not be evaluated, with the error message.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error() < tol
    }

    fn record(&mut self, block: &str, err: f64) {
        match self.blocks.iter_mut().find(|b| b.block == block) {
            Some(b) => b.max_rel_error = b.max_rel_error.max(err),
            None => self.blocks.push(BlockError { block: block.into(), max_rel_error: err }),
        }
    }
}

/// `max|a − n| / max(max|n|, max|a|, 1e-8)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(1e-8f64, |m, v| m.max(v.abs()));
    diff / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One analytic block and the function whose finite differences it must match.
type Block<'a> = (&'static str, Vec<f64>, Vec<f64>, &'a dyn Fn(&[f64]) -> f64);

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn random_labels(n: usize, classes: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    // every class twice first, so each anchor has a positive and a negative
    let mut l: Vec<u32> = (0..n).map(|i| (i as u32 / 2) % classes).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

fn random_head(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpHead {
    let mut head = MlpHead::new(dims, rng).expect("valid dims");
    let params: Vec<f64> = head.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    head.set_params(&params).expect("same size");
    head
}

fn with_rows(m: &Matrix, flat: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), flat.to_vec()).expect("same size")
}

enum Draw {
    /// Inputs were too close to a kink.
    Redraw,
    Checked(Vec<(&'static str, f64)>),
}

fn compare(blocks: &[Block<'_>]) -> Vec<(&'static str, f64)> {
    blocks
        .iter()
        .map(|(name, x, analytic, f)| (*name, rel_error(analytic, &central_difference(x, FD_STEP, f))))
        .collect()
}

fn trial_linear(rng: &mut ChaCha8Rng) -> Result<Draw> {
    // f(w) = ‖Xw − y‖² / 2n
    let (n, d) = (12, 5);
    let x = random_matrix(n, d, rng);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |w: &[f64]| {
        x.row_iter().zip(&y).map(|(r, t)| (dot(r, w) - t) * (dot(r, w) - t)).sum::<f64>() / (2.0 * n as f64)
    };
    let mut grad = alloc::vec![0.0; d];
    for (r, t) in x.row_iter().zip(&y) {
        let res = dot(r, &w) - t;
        for (g, v) in grad.iter_mut().zip(r) {
            *g += res * v / n as f64;
        }
    }
    Ok(Draw::Checked(compare(&[("weights", w.clone(), grad, &f)])))
}

fn trial_pair_loss(base: &BaseObjective, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let (n, d) = match base {
        BaseObjective::Margin(_) => (8, 4),
        BaseObjective::Multisim(_) => (10, 8),
    };
    let raw = random_matrix(n, d, rng);
    let labels = random_labels(n, 3, rng);
    let betas: Vec<f64> = match base {
        BaseObjective::Margin(_) => (0..3).map(|_| rng.random_range(0.8..1.4)).collect(),
        BaseObjective::Multisim(_) => Vec::new(),
    };
    let z = normalize_rows(&raw)?;
    let mining = base.mine(&z, &labels, rng)?;
    let out = base.evaluate(&z, &labels, &betas, &mining)?;
    if out.min_kink_distance < HINGE_SLACK {
        return Ok(Draw::Redraw);
    }
    let eval = |raw: &Matrix, betas: &[f64]| -> f64 {
        let z = normalize_rows(raw).expect("nonzero rows");
        base.evaluate(&z, &labels, betas, &mining).expect("valid inputs").value
    };
    let f_emb = |x: &[f64]| eval(&with_rows(&raw, x), &betas);
    let f_beta = |b: &[f64]| eval(&raw, b);
    let grad_raw = normalize_backward(&raw, &z, &out.grad_embeddings);
    let mut blocks: Vec<Block<'_>> = alloc::vec![("embeddings", raw.as_slice().to_vec(), grad_raw.into_vec(), &f_emb)];
    if let Some(gb) = out.grad_betas {
        blocks.push(("betas", betas.clone(), gb, &f_beta));
    }
    Ok(Draw::Checked(compare(&blocks)))
}

fn trial_kl(rng: &mut ChaCha8Rng) -> Result<Draw> {
    let n = 6;
    let a = random_matrix(n, n, rng);
    let b = random_matrix(n, n, rng);
    let t = rng.random_range(0.5..2.0);
    let kl = row_softmax_kl(&a, &b, t)?;
    let f_a = |x: &[f64]| row_softmax_kl(&with_rows(&a, x), &b, t).expect("square").value;
    let f_b = |x: &[f64]| row_softmax_kl(&a, &with_rows(&b, x), t).expect("square").value;
    Ok(Draw::Checked(compare(&[
        ("a", a.as_slice().to_vec(), kl.grad_a.into_vec(), &f_a),
        ("b", b.as_slice().to_vec(), kl.grad_b.into_vec(), &f_b),
    ])))
}

/// Full composite: margin base objective, two target branches and feature
/// distillation from iteration 0. Targets are not detached so that the
/// analytic gradient is the true derivative with respect to the head
/// parameters; the feature teacher stays detached, so its term is removed
/// from the finite differences taken with respect to the features.
fn trial_s2sd(rng: &mut ChaCha8Rng) -> Result<Draw> {
    let (n, d, df) = (6, 8, 12);
    let cfg = S2sdConfig {
        gamma: 1.0,
        temperature: 1.0,
        target_dims: alloc::vec![16, 32],
        warmup_iters: 0,
        use_feature_distill: true,
        detach_targets: false,
    };
    let base = BaseObjective::Margin(MarginConfig::default());
    let raw = random_matrix(n, d, rng);
    let features = random_matrix(n, df, rng);
    let labels = random_labels(n, 3, rng);
    let heads: Vec<MlpHead> = cfg.target_dims.iter().map(|&t| random_head(&[df, t, t], rng)).collect();
    if heads.iter().any(|h| h.forward(&features).map_or(0.0, |(_, c)| c.min_relu_margin()) < RELU_SLACK) {
        return Ok(Draw::Redraw);
    }
    let betas: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(0.8..1.4)).collect()).collect();
    let inputs = S2sdInputs { ref_embeddings: &raw, features: &features, labels: &labels };
    let out = s2sd_loss(inputs, &heads, &base, &betas, &cfg, 0, MiningSource::Sample(rng))?;
    if out.min_kink_distance < HINGE_SLACK {
        return Ok(Draw::Redraw);
    }
    let minings: Vec<Mining> = out.minings.clone();
    let run = |raw: &Matrix, feats: &Matrix, heads: &[MlpHead], betas: &[Vec<f64>]| {
        let inputs = S2sdInputs { ref_embeddings: raw, features: feats, labels: &labels };
        s2sd_loss(inputs, heads, &base, betas, &cfg, 0, MiningSource::Fixed(&minings)).expect("valid inputs")
    };
    let f_ref = |x: &[f64]| run(&with_rows(&raw, x), &features, &heads, &betas).value;
    let f_feat = |x: &[f64]| {
        let o = run(&raw, &with_rows(&features, x), &heads, &betas);
        o.value - cfg.gamma * o.feature_distill.unwrap_or(0.0)
    };
    let head_fn = |b: usize| {
        let (heads, raw, features, betas, run) = (&heads, &raw, &features, &betas, &run);
        move |p: &[f64]| {
            let mut hs = heads.clone();
            hs[b].set_params(p).expect("same size");
            run(raw, features, &hs, betas).value
        }
    };
    let f_h0 = head_fn(0);
    let f_h1 = head_fn(1);
    let flat_betas: Vec<f64> = betas.concat();
    let f_betas = |p: &[f64]| {
        let bs: Vec<Vec<f64>> = p.chunks(3).map(<[f64]>::to_vec).collect();
        run(&raw, &features, &heads, &bs).value
    };
    let beta_grads: Vec<f64> = out.beta_grads.iter().flat_map(|g| g.clone().unwrap_or_default()).collect();
    Ok(Draw::Checked(compare(&[
        ("ref_embeddings", raw.as_slice().to_vec(), out.grad_ref.as_slice().to_vec(), &f_ref),
        ("features", features.as_slice().to_vec(), out.grad_features.as_slice().to_vec(), &f_feat),
        ("target_head_0", heads[0].params(), out.head_grads[0].flatten(), &f_h0),
        ("target_head_1", heads[1].params(), out.head_grads[1].flatten(), &f_h1),
        ("betas", flat_betas, beta_grads, &f_betas),
    ])))
}

/// Random two-layer head followed by normalization and the margin loss.
fn trial_mlp_margin(rng: &mut ChaCha8Rng) -> Result<Draw> {
    let (n, din) = (8, 6);
    let head = random_head(&[din, 10, 4], rng);
    let x = random_matrix(n, din, rng);
    let labels = random_labels(n, 3, rng);
    let cfg = MarginConfig::default();
    let base = BaseObjective::Margin(cfg);
    let betas = alloc::vec![1.2; 3];
    let (raw, cache) = head.forward(&x)?;
    if cache.min_relu_margin() < RELU_SLACK {
        return Ok(Draw::Redraw);
    }
    let z = normalize_rows(&raw)?;
    let mining = base.mine(&z, &labels, rng)?;
    let out = base.evaluate(&z, &labels, &betas, &mining)?;
    if out.min_kink_distance < HINGE_SLACK {
        return Ok(Draw::Redraw);
    }
    let grads = head.backward(&cache, &normalize_backward(&raw, &z, &out.grad_embeddings))?;
    let eval = |h: &MlpHead, x: &Matrix| {
        let z = normalize_rows(&h.predict(x).expect("shapes")).expect("nonzero rows");
        base.evaluate(&z, &labels, &betas, &mining).expect("valid inputs").value
    };
    let f_params = |p: &[f64]| {
        let mut h = head.clone();
        h.set_params(p).expect("same size");
        eval(&h, &x)
    };
    let f_input = |p: &[f64]| eval(&head, &with_rows(&x, p));
    Ok(Draw::Checked(compare(&[
        ("head_params", head.params(), grads.flatten(), &f_params),
        ("inputs", x.as_slice().to_vec(), grads.input.into_vec(), &f_input),
    ])))
}

fn run_trial(obj: GradObjective, rng: &mut ChaCha8Rng) -> Result<Draw> {
    match obj {
        GradObjective::LinearRegression => trial_linear(rng),
        GradObjective::Margin => trial_pair_loss(&BaseObjective::Margin(MarginConfig::default()), rng),
        GradObjective::Multisim => trial_pair_loss(&BaseObjective::Multisim(MultisimConfig::default()), rng),
        GradObjective::RowSoftmaxKl => trial_kl(rng),
        GradObjective::S2sd => trial_s2sd(rng),
        GradObjective::MlpMargin => trial_mlp_margin(rng),
    }
}

/// Runs `trials` accepted draws of `obj`; errors are collected in the report.
pub fn grad_check(obj: GradObjective, trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        GradCheckReport { objective: obj, trials: 0, redrawn: 0, blocks: Vec::new(), failures: Vec::new() };
    while report.trials < trials {
        match run_trial(obj, &mut rng) {
            Ok(Draw::Checked(errs)) => {
                report.trials += 1;
                for (block, e) in errs {
                    report.record(block, e);
                }
            }
            Ok(Draw::Redraw) => {
                report.redrawn += 1;
                if report.redrawn > MAX_REDRAWS {
                    report.failures.push(alloc::format!("gave up after {MAX_REDRAWS} draws near a kink"));
                    break;
                }
            }
            Err(e) => {
                report.trials += 1;
                report.failures.push(alloc::format!("{e}"));
            }
        }
    }
    report
}

/// Convenience wrapper returning an error when the check fails.
pub fn assert_grad_check(obj: GradObjective, trials: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let r = grad_check(obj, trials, seed);
    if r.passed(tol) {
        Ok(r)
    } else {
        Err(Error::NumericalFailure(alloc::format!(
            "{} gradient check: max relative error {:e}, failures {:?}",
            obj.name(),
            r.max_rel_error(),
            r.failures
        )))
    }
}
