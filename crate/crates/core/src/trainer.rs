//! Deterministic training of MLP embedding heads and few-shot adaptation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::{normalize_rows, sample_around, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    margin_loss, normalize_backward, s2sd_loss, sample_margin_pairs, BaseObjective, MarginConfig, MiningSource,
    S2sdConfig, S2sdInputs,
};
use crate::metrics::{density, kmeans, retrieval_report, spectral_decay, Metric, RetrievalReport, DEFAULT_MAX_ITERS};
use crate::nn::{ForwardCache, MlpHead};
use crate::optim::{AdamConfig, AdamState};

/// Samples drawn per class when building a batch.
pub const SAMPLES_PER_CLASS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Base(BaseObjective),
    S2sd { base: BaseObjective, cfg: S2sdConfig },
}

impl Objective {
    pub fn base(&self) -> &BaseObjective {
        match self {
            Objective::Base(b) | Objective::S2sd { base: b, .. } => b,
        }
    }

    fn target_dims(&self) -> &[usize] {
        match self {
            Objective::Base(_) => &[],
            Objective::S2sd { cfg, .. } => &cfg.target_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Evaluate every this many epochs (0 disables evaluation).
    pub eval_every: usize,
    /// Hidden widths of the reference head; the last hidden layer provides
    /// the features fed to the target heads.
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub adam: AdamConfig,
    /// First epoch updates only the target heads.
    pub head_warmup: bool,
    /// Leading singular values skipped by the spectral-decay metric.
    pub spectral_skip: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            seed: 0,
            objective: Objective::Base(BaseObjective::Margin(MarginConfig::default())),
            eval_every: 1,
            hidden_dims: alloc::vec![64],
            embed_dim: 16,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            head_warmup: false,
            spectral_skip: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self, data: &EmbeddingSet) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::InvalidConfig(format!("batch_size must be >= 4, got {}", self.batch_size)));
        }
        if data.class_index().num_classes() < 2 {
            return Err(Error::NeedTwoClasses);
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if let Objective::S2sd { cfg, .. } = &self.objective {
            cfg.validate(self.embed_dim)?;
        }
        Ok(())
    }
}

/// Metrics of the reference embedding on the evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub recall_at_1: f64,
    pub map_at_1000: f64,
    pub nmi: f64,
    pub pi_ratio: f64,
    /// `None` when the spectrum is degenerate.
    pub spectral_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Mean distillation term over the epoch's batches (s2sd with targets).
    pub distill: Option<f64>,
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub reference: MlpHead,
    pub targets: Vec<MlpHead>,
    /// Evaluation of the untrained reference head.
    pub initial: Option<EvalMetrics>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.history.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Normalized reference embeddings of `set`.
pub fn embed(head: &MlpHead, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    set.with_data(normalize_rows(&head.predict(set.data())?)?)
}

pub fn evaluate(head: &MlpHead, set: &EmbeddingSet, spectral_skip: usize, seed: u64) -> Result<EvalMetrics> {
    let emb = embed(head, set)?;
    let report = retrieval_report(&emb, &[1], &[1000], Metric::Euclidean)?;
    let k = emb.class_index().num_classes();
    let clusters = kmeans(&emb, k, seed, DEFAULT_MAX_ITERS)?;
    let dens = density(&emb)?;
    let decay = match spectral_decay(&emb, spectral_skip) {
        Ok(v) => Some(v),
        Err(Error::DegenerateSpectrum) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalMetrics {
        recall_at_1: report.recall_at[&1],
        map_at_1000: report.map_at[&1000],
        nmi: clusters.nmi,
        pi_ratio: dens.pi_ratio,
        spectral_decay: decay,
    })
}

/// Class-balanced batch: `batch_size / 2` classes (all of them if fewer),
/// two distinct rows from each.
pub fn sample_batch<R: Rng + ?Sized>(groups: &[Vec<usize>], batch_size: usize, rng: &mut R) -> Vec<usize> {
    let n_classes = (batch_size / SAMPLES_PER_CLASS).min(groups.len());
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let (classes, _) = order.partial_shuffle(rng, n_classes);
    let mut batch = Vec::with_capacity(n_classes * SAMPLES_PER_CLASS);
    for &c in classes.iter() {
        let mut rows = groups[c].clone();
        let take = SAMPLES_PER_CLASS.min(rows.len());
        let (picked, _) = rows.partial_shuffle(rng, take);
        batch.extend_from_slice(picked);
    }
    batch
}

fn num_betas(labels: &[u32]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m as usize + 1)
}

struct Trainer {
    reference: MlpHead,
    targets: Vec<MlpHead>,
    betas: Vec<Vec<f64>>,
    ref_opt: AdamState,
    target_opts: Vec<AdamState>,
    beta_opts: Vec<AdamState>,
}

impl Trainer {
    fn new(data: &EmbeddingSet, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut dims = alloc::vec![data.dim()];
        dims.extend_from_slice(&cfg.hidden_dims);
        dims.push(cfg.embed_dim);
        let reference = MlpHead::new(&dims, rng)?;
        let feat_dim = reference.penultimate_dim();
        let targets = cfg
            .objective
            .target_dims()
            .iter()
            .map(|&d| MlpHead::new(&[feat_dim, d, d], rng))
            .collect::<Result<Vec<_>>>()?;
        let base = cfg.objective.base();
        let nb = num_betas(data.labels());
        let betas: Vec<Vec<f64>> = (0..=targets.len()).map(|_| base.initial_betas(nb)).collect();
        let beta_cfg = AdamConfig { lr: base.beta_lr(), weight_decay: 0.0, ..cfg.adam };
        Ok(Self {
            ref_opt: AdamState::new(cfg.adam, reference.num_params()),
            target_opts: targets.iter().map(|h| AdamState::new(cfg.adam, h.num_params())).collect(),
            beta_opts: betas.iter().map(|b| AdamState::new(beta_cfg, b.len())).collect(),
            reference,
            targets,
            betas,
        })
    }

    fn step_reference(&mut self, cache: &ForwardCache, grad_out: &Matrix, grad_feat: Option<&Matrix>) -> Result<()> {
        let grads = match grad_feat {
            Some(g) => self.reference.backward_with_penultimate(cache, grad_out, g)?,
            None => self.reference.backward(cache, grad_out)?,
        };
        let mut params = self.reference.params();
        self.ref_opt.step(&mut params, &grads.flatten())?;
        self.reference.set_params(&params)
    }

    fn step_betas(&mut self, idx: usize, grad: Option<&Vec<f64>>) -> Result<()> {
        if let Some(g) = grad {
            if !g.is_empty() {
                self.beta_opts[idx].step(&mut self.betas[idx], g)?;
            }
        }
        Ok(())
    }

    /// One optimisation step; returns (loss, mean distillation term).
    fn batch_step(
        &mut self,
        x: &Matrix,
        labels: &[u32],
        cfg: &TrainConfig,
        iteration: i64,
        update_reference: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Option<f64>)> {
        let (raw, cache) = self.reference.forward(x)?;
        match &cfg.objective {
            Objective::Base(base) => {
                let z = normalize_rows(&raw)?;
                let mining = base.mine(&z, labels, rng)?;
                let out = base.evaluate(&z, labels, &self.betas[0], &mining)?;
                let grad_raw = normalize_backward(&raw, &z, &out.grad_embeddings);
                if update_reference {
                    self.step_reference(&cache, &grad_raw, None)?;
                    self.step_betas(0, out.grad_betas.as_ref())?;
                }
                Ok((out.value, None))
            }
            Objective::S2sd { base, cfg: s2sd } => {
                let features = cache.penultimate().clone();
                let out = s2sd_loss(
                    S2sdInputs { ref_embeddings: &raw, features: &features, labels },
                    &self.targets,
                    base,
                    &self.betas,
                    s2sd,
                    iteration,
                    MiningSource::Sample(rng),
                )?;
                if update_reference {
                    let feat_grad = if self.targets.is_empty() { None } else { Some(&out.grad_features) };
                    self.step_reference(&cache, &out.grad_ref, feat_grad)?;
                    self.step_betas(0, out.beta_grads[0].as_ref())?;
                }
                for (b, grads) in out.head_grads.iter().enumerate() {
                    let mut params = self.targets[b].params();
                    self.target_opts[b].step(&mut params, &grads.flatten())?;
                    self.targets[b].set_params(&params)?;
                    self.step_betas(b + 1, out.beta_grads[b + 1].as_ref())?;
                }
                Ok((out.value, out.mean_distill()))
            }
        }
    }
}

/// Trains a reference head (plus target heads for s2sd) on `train`;
/// metrics are computed on `eval` when given, otherwise on `train`.
pub fn train(train: &EmbeddingSet, eval: Option<&EmbeddingSet>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = Trainer::new(train, cfg, &mut rng)?;
    let eval_set = eval.unwrap_or(train);
    let eval_seed = cfg.seed ^ 0x5eed;
    let initial = if cfg.eval_every > 0 {
        Some(evaluate(&state.reference, eval_set, cfg.spectral_skip, eval_seed)?)
    } else {
        None
    };
    let groups = train.class_index().row_groups;
    let per_epoch = (train.len() / cfg.batch_size).max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iteration: i64 = 0;
    for epoch in 1..=cfg.epochs {
        let warmup = cfg.head_warmup && epoch == 1 && !state.targets.is_empty();
        let mut loss_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut distill_count = 0usize;
        for _ in 0..per_epoch {
            let idx = sample_batch(&groups, cfg.batch_size, &mut rng);
            let x = train.data().select_rows(&idx);
            let labels: Vec<u32> = idx.iter().map(|&i| train.labels()[i]).collect();
            let (loss, distill) = state.batch_step(&x, &labels, cfg, iteration, !warmup, &mut rng)?;
            loss_sum += loss;
            if let Some(d) = distill {
                distill_sum += d;
                distill_count += 1;
            }
            iteration += 1;
        }
        let eval = if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            Some(evaluate(&state.reference, eval_set, cfg.spectral_skip, eval_seed)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / per_epoch as f64,
            distill: (distill_count > 0).then(|| distill_sum / distill_count as f64),
            eval,
        });
    }
    Ok(TrainOutcome { reference: state.reference, targets: state.targets, initial, history })
}

/// Train/test sets with a distribution shift between them.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSpec {
    pub train_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Leading coordinates that carry class information; the rest is noise.
    pub informative_dims: usize,
    /// Offset added to every informative coordinate of the test-class means.
    pub shift: f64,
    pub within_class_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl OodSpec {
    pub fn new(train_classes: usize, test_classes: usize, samples_per_class: usize, dim: usize, seed: u64) -> Self {
        Self {
            train_classes,
            test_classes,
            samples_per_class,
            dim,
            informative_dims: (dim / 4).max(1),
            shift: 0.75,
            within_class_std: 0.2,
            noise_std: 1.0,
            seed,
        }
    }
}

/// Class means live in the informative coordinates (uniform in `[-1, 1]`,
/// shifted for test classes); the remaining coordinates are class-independent
/// Gaussian noise. Test class ids follow the train ids.
pub fn synth_ood_task(spec: &OodSpec) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if spec.informative_dims == 0 || spec.informative_dims > spec.dim {
        return Err(Error::InvalidConfig(format!(
            "informative_dims must lie in 1..={}, got {}",
            spec.dim, spec.informative_dims
        )));
    }
    if spec.train_classes < 2 || spec.test_classes < 2 || spec.samples_per_class < 2 {
        return Err(Error::InvalidConfig("need >= 2 classes per side and >= 2 samples per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.informative_dims;
    let draw = |count: usize, shift: f64, first: u32, rng: &mut ChaCha8Rng| -> Result<EmbeddingSet> {
        let means: Vec<Vec<f64>> =
            (0..count).map(|_| (0..k).map(|_| rng.random_range(-1.0..=1.0) + shift).collect()).collect();
        let informative = sample_around(&means, spec.samples_per_class, spec.within_class_std, rng, first)?;
        let n = informative.len();
        let mut data = Vec::with_capacity(n * spec.dim);
        for i in 0..n {
            data.extend_from_slice(informative.row(i));
            for _ in k..spec.dim {
                let z: f64 = rng.sample(StandardNormal);
                data.push(spec.noise_std * z);
            }
        }
        EmbeddingSet::new(Matrix::from_vec(n, spec.dim, data)?, informative.labels().to_vec())
    };
    let train = draw(spec.train_classes, 0.0, 0, &mut rng)?;
    let test = draw(spec.test_classes, spec.shift, spec.train_classes as u32, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    /// Support samples per class.
    pub shots: usize,
    pub episodes: usize,
    /// Full-batch steps on the support set.
    pub adapt_epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub margin: MarginConfig,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { shots: 5, episodes: 10, adapt_epochs: 50, seed: 0, lr: 1e-2, margin: MarginConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub zero_shot: RetrievalReport,
    pub adapted: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotReport {
    pub episodes: Vec<EpisodeResult>,
    /// Means over episodes.
    pub zero_shot: RetrievalReport,
    pub adapted: RetrievalReport,
}

fn mean_reports<'a>(reports: impl Iterator<Item = &'a RetrievalReport>) -> RetrievalReport {
    let mut recall: BTreeMap<usize, f64> = BTreeMap::new();
    let mut map: BTreeMap<usize, f64> = BTreeMap::new();
    let mut n = 0usize;
    for r in reports {
        n += 1;
        for (&k, &v) in &r.recall_at {
            *recall.entry(k).or_default() += v;
        }
        for (&k, &v) in &r.map_at {
            *map.entry(k).or_default() += v;
        }
    }
    let d = n.max(1) as f64;
    recall.values_mut().for_each(|v| *v /= d);
    map.values_mut().for_each(|v| *v /= d);
    RetrievalReport { recall_at: recall, map_at: map }
}

/// Per episode: `shots` support rows per class are drawn, only the last layer
/// of a copy of `head` is fine-tuned on them with the margin loss, and both
/// the original and the adapted head are evaluated on the remaining rows.
pub fn few_shot_adapt(head: &MlpHead, test: &EmbeddingSet, spec: &EpisodeSpec) -> Result<FewShotReport> {
    if spec.shots == 0 || spec.episodes == 0 {
        return Err(Error::InvalidConfig("shots and episodes must be positive".into()));
    }
    let idx = test.class_index();
    if idx.num_classes() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    if let Some(p) = idx.row_groups.iter().position(|g| g.len() <= spec.shots) {
        return Err(Error::InsufficientSupport(idx.class_ids[p]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nb = num_betas(test.labels());
    let opt_cfg = AdamConfig { lr: spec.lr, weight_decay: 0.0, ..AdamConfig::default() };
    let beta_cfg = AdamConfig { lr: spec.margin.beta_lr, weight_decay: 0.0, ..AdamConfig::default() };
    let mut episodes = Vec::with_capacity(spec.episodes);
    for _ in 0..spec.episodes {
        let mut support = Vec::new();
        let mut query = Vec::new();
        for group in &idx.row_groups {
            let mut rows = group.clone();
            rows.shuffle(&mut rng);
            support.extend_from_slice(&rows[..spec.shots]);
            query.extend_from_slice(&rows[spec.shots..]);
        }
        support.sort_unstable();
        query.sort_unstable();
        let support_set = test.select_rows(&support)?;
        let query_set = test.select_rows(&query)?;

        let mut adapted = head.clone();
        if spec.adapt_epochs > 0 {
            let (_, cache) = head.forward(support_set.data())?;
            let features = cache.penultimate().clone();
            let mut last = MlpHead::from_layers(alloc::vec![head.last_layer().clone()])?;
            let mut opt = AdamState::new(opt_cfg, last.num_params());
            let mut betas = alloc::vec![spec.margin.beta_init; nb];
            let mut beta_opt = AdamState::new(beta_cfg, nb);
            let labels = support_set.labels();
            for _ in 0..spec.adapt_epochs {
                let (raw, c) = last.forward(&features)?;
                let z = normalize_rows(&raw)?;
                let pairs = sample_margin_pairs(&z, labels, &spec.margin, &mut rng)?;
                let out = margin_loss(&z, labels, &betas, &spec.margin, &pairs)?;
                let grads = last.backward(&c, &normalize_backward(&raw, &z, &out.grad_embeddings))?;
                let mut params = last.params();
                opt.step(&mut params, &grads.flatten())?;
                last.set_params(&params)?;
                if let Some(g) = &out.grad_betas {
                    beta_opt.step(&mut betas, g)?;
                }
            }
            *adapted.last_layer_mut() = last.last_layer().clone();
        }
        // with a single query per class no query has a partner and mAP is undefined
        let cutoffs: &[usize] = if query.len() > idx.num_classes() { &[1000] } else { &[] };
        let report = |h: &MlpHead| retrieval_report(&embed(h, &query_set)?, &[1], cutoffs, Metric::Euclidean);
        episodes.push(EpisodeResult { zero_shot: report(head)?, adapted: report(&adapted)? });
    }
    Ok(FewShotReport {
        zero_shot: mean_reports(episodes.iter().map(|e| &e.zero_shot)),
        adapted: mean_reports(episodes.iter().map(|e| &e.adapted)),
        episodes,
    })
}
