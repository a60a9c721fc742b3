//! Train/test class splits of increasing distribution shift.
//!
//! Starting from an initial class partition, classes are exchanged between
//! the train and test side using a class-mean surrogate: the train class that
//! sits furthest from its own split (relative to the other split) is traded
//! for the test class with the same property. A swap is only kept when the
//! true Frechet distance between the two sides increases. Once swapping
//! converges, classes closest to the opposite side's mean are removed from
//! both sides until a retained-sample floor is reached.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{ClassIndex, EmbeddingSet};
use crate::error::{shape, Error, Result};
use crate::fid::{frechet_distance, summarize_rows};
use crate::linalg::dist;

/// Minimum FID gain for a swap to be accepted.
pub const SWAP_ACCEPT_EPS: f64 = 1e-9;
pub const DEFAULT_RETAINED_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Initial,
    Swap,
    Removal,
}

impl StateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::Initial => "initial",
            StateKind::Swap => "swap",
            StateKind::Removal => "removal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    /// Ascending class ids.
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
    pub fid: f64,
    pub step: usize,
    pub kind: StateKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSequence {
    pub states: Vec<SplitState>,
    pub swap_size: usize,
    pub retained_fraction_floor: f64,
}

/// Whether swaps should push the train/test shift up (the default) or down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    /// Class pairs exchanged per swap step.
    pub swap_size: usize,
    pub retained_fraction_floor: f64,
    pub direction: Direction,
    /// Only used to draw a random half when no initial train classes are given.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { swap_size: 1, retained_fraction_floor: DEFAULT_RETAINED_FLOOR, direction: Direction::Increase, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialSplit {
    Classes(BTreeSet<u32>),
    /// A seeded random half of the classes goes to train.
    RandomHalf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SwapOutcome {
    Accepted(SplitState),
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemovalOutcome {
    Removed(SplitState),
    Stopped,
}

/// Weighted mean of the given class means.
fn side_mean(index: &ClassIndex, positions: &[usize]) -> Vec<f64> {
    let d = index.class_means.first().map_or(0, Vec::len);
    let mut mean = alloc::vec![0.0; d];
    let mut total = 0usize;
    for &p in positions {
        let n = index.count(p);
        total += n;
        for (m, v) in mean.iter_mut().zip(&index.class_means[p]) {
            *m += n as f64 * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    mean
}

/// Position in `candidates` maximizing `‖μ_C − μ_own‖ − ‖μ_C − μ_other‖`
/// (negated for [`Direction::Decrease`]); ties go to the smaller class id.
fn argmax_outlier(
    index: &ClassIndex,
    candidates: &[usize],
    own: &[f64],
    other: &[f64],
    dir: Direction,
) -> Option<usize> {
    let mut best: Option<(f64, u32, usize)> = None;
    for &p in candidates {
        let mu = &index.class_means[p];
        let mut score = dist(mu, own) - dist(mu, other);
        if dir == Direction::Decrease {
            score = -score;
        }
        let id = index.class_ids[p];
        let better = match best {
            None => true,
            Some((s, bid, _)) => score > s || (score == s && id < bid),
        };
        if better {
            best = Some((score, id, p));
        }
    }
    best.map(|(_, _, p)| p)
}

/// Class in `candidates` whose mean is closest to `target`; ties to the smaller id.
fn argmin_to(index: &ClassIndex, candidates: &[usize], target: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, u32, usize)> = None;
    for &p in candidates {
        let d = dist(&index.class_means[p], target);
        let id = index.class_ids[p];
        if best.map_or(true, |(bd, bid, _)| d < bd || (d == bd && id < bid)) {
            best = Some((d, id, p));
        }
    }
    best.map(|(_, _, p)| p)
}

/// Class-mean surrogate selection between two embedding sets: returns the
/// (train class, test class) pair whose exchange is expected to increase the
/// shift the most.
pub fn select_swap_pair(train: &EmbeddingSet, test: &EmbeddingSet) -> Result<(u32, u32)> {
    if train.dim() != test.dim() {
        return Err(shape("train and test embeddings differ in dimension"));
    }
    let ti = train.class_index();
    let si = test.class_index();
    if ti.num_classes() < 2 || si.num_classes() < 2 {
        return Err(Error::CannotSwap);
    }
    let t_all: Vec<usize> = (0..ti.num_classes()).collect();
    let s_all: Vec<usize> = (0..si.num_classes()).collect();
    let mu_train = side_mean(&ti, &t_all);
    let mu_test = side_mean(&si, &s_all);
    let pt = argmax_outlier(&ti, &t_all, &mu_train, &mu_test, Direction::Increase).ok_or(Error::CannotSwap)?;
    let ps = argmax_outlier(&si, &s_all, &mu_test, &mu_train, Direction::Increase).ok_or(Error::CannotSwap)?;
    Ok((ti.class_ids[pt], si.class_ids[ps]))
}

/// Runs swap and removal steps over one embedding set.
#[derive(Debug)]
pub struct SplitBuilder<'a> {
    data: &'a EmbeddingSet,
    index: ClassIndex,
    cfg: SplitConfig,
    original_total: usize,
}

impl<'a> SplitBuilder<'a> {
    pub fn new(data: &'a EmbeddingSet, cfg: SplitConfig) -> Result<Self> {
        if cfg.swap_size == 0 {
            return Err(Error::InvalidConfig("swap_size must be at least 1".into()));
        }
        if !(cfg.retained_fraction_floor > 0.0 && cfg.retained_fraction_floor <= 1.0) {
            return Err(Error::InvalidConfig("retained_fraction_floor must lie in (0, 1]".into()));
        }
        Ok(Self { data, index: data.class_index(), cfg, original_total: data.len() })
    }

    pub fn class_index(&self) -> &ClassIndex {
        &self.index
    }

    /// Validates the partition and evaluates its FID as the initial state.
    pub fn initial_state(&self, initial: &InitialSplit) -> Result<SplitState> {
        let train: BTreeSet<u32> = match initial {
            InitialSplit::Classes(c) => c.clone(),
            InitialSplit::RandomHalf => {
                let mut ids = self.index.class_ids.clone();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed));
                ids.truncate(ids.len() / 2);
                ids.into_iter().collect()
            }
        };
        if let Some(&bad) = train.iter().find(|c| self.index.position(**c).is_none()) {
            return Err(Error::UnknownClass(bad));
        }
        let train_classes: Vec<u32> = train.iter().copied().collect();
        let test_classes: Vec<u32> = self.index.class_ids.iter().copied().filter(|c| !train.contains(c)).collect();
        if train_classes.is_empty() || test_classes.is_empty() {
            return Err(Error::EmptySplit);
        }
        let fid = self.split_fid(&train_classes, &test_classes)?;
        Ok(SplitState { train_classes, test_classes, fid, step: 0, kind: StateKind::Initial })
    }

    fn positions(&self, classes: &[u32]) -> Vec<usize> {
        classes.iter().filter_map(|&c| self.index.position(c)).collect()
    }

    fn sample_count(&self, classes: &[u32]) -> usize {
        self.positions(classes).iter().map(|&p| self.index.count(p)).sum()
    }

    fn rows_of(&self, classes: &[u32]) -> Vec<usize> {
        let mut rows: Vec<usize> =
            self.positions(classes).iter().flat_map(|&p| self.index.row_groups[p].iter().copied()).collect();
        rows.sort_unstable();
        rows
    }

    /// FID between the rows of the two class sets.
    pub fn split_fid(&self, train: &[u32], test: &[u32]) -> Result<f64> {
        let a = summarize_rows(self.data.data(), Some(&self.rows_of(train)))?;
        let b = summarize_rows(self.data.data(), Some(&self.rows_of(test)))?;
        frechet_distance(&a, &b)
    }

    fn improves(&self, new: f64, old: f64) -> bool {
        match self.cfg.direction {
            Direction::Increase => new > old + SWAP_ACCEPT_EPS,
            Direction::Decrease => new < old - SWAP_ACCEPT_EPS,
        }
    }

    /// Exchanges up to `swap_size` class pairs, reselecting against the
    /// updated split means after each pair. The result is accepted only if
    /// the FID moves in the configured direction.
    pub fn swap_step(&self, state: &SplitState) -> Result<SwapOutcome> {
        let mut train = self.positions(&state.train_classes);
        let mut test = self.positions(&state.test_classes);
        if train.len() < 2 || test.len() < 2 {
            return Ok(SwapOutcome::Converged);
        }
        let mut moved: BTreeSet<usize> = BTreeSet::new();
        for _ in 0..self.cfg.swap_size {
            let cand_train: Vec<usize> = train.iter().copied().filter(|p| !moved.contains(p)).collect();
            let cand_test: Vec<usize> = test.iter().copied().filter(|p| !moved.contains(p)).collect();
            if cand_train.is_empty() || cand_test.is_empty() {
                break;
            }
            let mu_train = side_mean(&self.index, &train);
            let mu_test = side_mean(&self.index, &test);
            let dir = self.cfg.direction;
            let (Some(pt), Some(ps)) = (
                argmax_outlier(&self.index, &cand_train, &mu_train, &mu_test, dir),
                argmax_outlier(&self.index, &cand_test, &mu_test, &mu_train, dir),
            ) else {
                break;
            };
            train.retain(|&p| p != pt);
            test.retain(|&p| p != ps);
            train.push(ps);
            test.push(pt);
            moved.insert(pt);
            moved.insert(ps);
        }
        let train_classes = self.sorted_ids(&train);
        let test_classes = self.sorted_ids(&test);
        let fid = self.split_fid(&train_classes, &test_classes)?;
        if !self.improves(fid, state.fid) {
            return Ok(SwapOutcome::Converged);
        }
        Ok(SwapOutcome::Accepted(SplitState {
            train_classes,
            test_classes,
            fid,
            step: state.step + 1,
            kind: StateKind::Swap,
        }))
    }

    /// Drops the train class closest to the test mean and the test class
    /// closest to the train mean. Removals are not gated on FID.
    pub fn removal_step(&self, state: &SplitState) -> Result<RemovalOutcome> {
        let train = self.positions(&state.train_classes);
        let test = self.positions(&state.test_classes);
        if train.len() < 3 || test.len() < 3 {
            return Ok(RemovalOutcome::Stopped);
        }
        let mu_train = side_mean(&self.index, &train);
        let mu_test = side_mean(&self.index, &test);
        let (Some(pt), Some(ps)) = (argmin_to(&self.index, &train, &mu_test), argmin_to(&self.index, &test, &mu_train))
        else {
            return Ok(RemovalOutcome::Stopped);
        };
        let current = self.sample_count(&state.train_classes) + self.sample_count(&state.test_classes);
        let remaining = current - self.index.count(pt) - self.index.count(ps);
        if (remaining as f64) < self.cfg.retained_fraction_floor * self.original_total as f64 {
            return Ok(RemovalOutcome::Stopped);
        }
        let train: Vec<usize> = train.into_iter().filter(|&p| p != pt).collect();
        let test: Vec<usize> = test.into_iter().filter(|&p| p != ps).collect();
        let train_classes = self.sorted_ids(&train);
        let test_classes = self.sorted_ids(&test);
        let fid = self.split_fid(&train_classes, &test_classes)?;
        Ok(RemovalOutcome::Removed(SplitState {
            train_classes,
            test_classes,
            fid,
            step: state.step + 1,
            kind: StateKind::Removal,
        }))
    }

    fn sorted_ids(&self, positions: &[usize]) -> Vec<u32> {
        let mut ids: Vec<u32> = positions.iter().map(|&p| self.index.class_ids[p]).collect();
        ids.sort_unstable();
        ids
    }

    /// Swaps to convergence, then (when increasing the shift) removes classes
    /// until the retained-sample floor stops it.
    pub fn build(&self, initial: &InitialSplit) -> Result<SplitSequence> {
        let mut states = alloc::vec![self.initial_state(initial)?];
        loop {
            let last = states.last().expect("sequence is never empty");
            match self.swap_step(last)? {
                SwapOutcome::Accepted(s) => states.push(s),
                SwapOutcome::Converged => break,
            }
        }
        if self.cfg.direction == Direction::Increase {
            loop {
                let last = states.last().expect("sequence is never empty");
                match self.removal_step(last)? {
                    RemovalOutcome::Removed(s) => states.push(s),
                    RemovalOutcome::Stopped => break,
                }
            }
        }
        Ok(SplitSequence {
            states,
            swap_size: self.cfg.swap_size,
            retained_fraction_floor: self.cfg.retained_fraction_floor,
        })
    }
}

pub fn build_split_sequence(data: &EmbeddingSet, initial: &InitialSplit, cfg: SplitConfig) -> Result<SplitSequence> {
    SplitBuilder::new(data, cfg)?.build(initial)
}

/// FID values of a split sequence paired with one performance score per split.
#[derive(Debug, Clone, PartialEq)]
pub struct AgsInput {
    pub fids: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Aggregated generalization score: trapezoidal area under
/// (min-max normalized FID, score). Points are ordered by FID first.
pub fn ags(input: &AgsInput) -> Result<f64> {
    let AgsInput { fids, scores } = input;
    if fids.len() != scores.len() {
        return Err(shape(format!("{} fids but {} scores", fids.len(), scores.len())));
    }
    if fids.len() < 2 {
        return Err(Error::InsufficientData("AGS needs at least two splits".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidConfig(format!("score {s} outside [0, 1]")));
    }
    if fids.iter().any(|f| !f.is_finite()) {
        return Err(Error::InvalidConfig("non-finite fid".into()));
    }
    let mut points: Vec<(f64, f64)> = fids.iter().copied().zip(scores.iter().copied()).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    if points.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::DegenerateAxis);
    }
    let lo = points[0].0;
    let span = points[points.len() - 1].0 - lo;
    let area = points
        .windows(2)
        .map(|w| {
            let x0 = (w[0].0 - lo) / span;
            let x1 = (w[1].0 - lo) / span;
            0.5 * (x1 - x0) * (w[0].1 + w[1].1)
        })
        .sum::<f64>();
    Ok(area.clamp(0.0, 1.0))
}
