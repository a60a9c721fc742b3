//! Labeled embedding sets, per-class indexing and deterministic synthetic data.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

/// `N × D` embeddings with one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Matrix,
    labels: Vec<u32>,
    class_names: Option<Vec<String>>,
}

impl EmbeddingSet {
    pub fn new(data: Matrix, labels: Vec<u32>) -> Result<Self> {
        Self::with_names(data, labels, None)
    }

    pub fn with_names(data: Matrix, labels: Vec<u32>, class_names: Option<Vec<String>>) -> Result<Self> {
        let (n, d) = data.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidSet(format!("need at least one row and column, got {n}x{d}")));
        }
        if labels.len() != n {
            return Err(Error::InvalidSet(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(pos) = data.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSet(format!("non-finite value at row {}, column {}", pos / d, pos % d)));
        }
        if let Some(names) = &class_names {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= names.len()) {
                return Err(Error::InvalidSet(format!("label {bad} has no entry in the class-name table")));
            }
        }
        Ok(Self { data, labels, class_names })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    #[inline]
    pub fn data(&self) -> &Matrix {
        &self.data
    }

    #[inline]
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn class_index(&self) -> ClassIndex {
        ClassIndex::build(self)
    }

    /// Same labels, new embedding matrix.
    pub fn with_data(&self, data: Matrix) -> Result<Self> {
        if data.rows() != self.len() {
            return Err(Error::Shape(format!("{} rows for {} labels", data.rows(), self.len())));
        }
        Self::with_names(data, self.labels.clone(), self.class_names.clone())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::with_names(self.data.select_rows(idx), labels, self.class_names.clone())
    }

    /// Rows whose label is in `classes`, original order preserved.
    pub fn filter_classes(&self, classes: &BTreeSet<u32>) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::EmptySplit);
        }
        self.select_rows(&idx)
    }
}

/// Row groups and class means, keyed by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    pub class_ids: Vec<u32>,
    pub row_groups: Vec<Vec<usize>>,
    pub class_means: Vec<Vec<f64>>,
}

impl ClassIndex {
    pub fn build(set: &EmbeddingSet) -> Self {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in set.labels().iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let d = set.dim();
        let mut class_ids = Vec::with_capacity(groups.len());
        let mut row_groups = Vec::with_capacity(groups.len());
        let mut class_means = Vec::with_capacity(groups.len());
        for (id, rows) in groups {
            let mut mean = alloc::vec![0.0; d];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(set.row(r)) {
                    *m += v;
                }
            }
            let inv = 1.0 / rows.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            class_ids.push(id);
            row_groups.push(rows);
            class_means.push(mean);
        }
        Self { class_ids, row_groups, class_means }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Position of `class` in the ascending id list.
    pub fn position(&self, class: u32) -> Option<usize> {
        self.class_ids.binary_search(&class).ok()
    }

    pub fn count(&self, pos: usize) -> usize {
        self.row_groups[pos].len()
    }
}

/// Parameters of an isotropic Gaussian-mixture test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, dim: usize, seed: u64) -> Self {
        Self { num_classes, samples_per_class, dim, class_mean_scale: 1.0, within_class_std: 0.25, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("synthetic counts must be positive".into()));
        }
        if !(self.within_class_std >= 0.0 && self.within_class_std.is_finite()) {
            return Err(Error::InvalidConfig("within_class_std must be finite and non-negative".into()));
        }
        if !(self.class_mean_scale >= 0.0 && self.class_mean_scale.is_finite()) {
            return Err(Error::InvalidConfig("class_mean_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Class means drawn uniformly from `[-scale, scale]^D`, samples from an
/// isotropic Gaussian around them. Rows are grouped by class, class ids
/// `0..num_classes`.
pub fn synth_gaussian_classes(spec: &SynthSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    if spec.class_mean_scale > 0.0 {
                        rng.random_range(-spec.class_mean_scale..=spec.class_mean_scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    sample_around(&means, spec.samples_per_class, spec.within_class_std, &mut rng, 0)
}

/// Draws `per_class` isotropic samples around each mean; class ids start at
/// `first_label`.
pub fn sample_around<R: Rng + ?Sized>(
    means: &[Vec<f64>],
    per_class: usize,
    std: f64,
    rng: &mut R,
    first_label: u32,
) -> Result<EmbeddingSet> {
    let dim = means.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + std * z);
            }
            labels.push(first_label + c as u32);
        }
    }
    EmbeddingSet::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    set.with_data(normalize_rows(set.data())?)
}

pub(crate) const ZERO_NORM_TOL: f64 = 1e-12;

pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n <= ZERO_NORM_TOL {
            return Err(Error::DegenerateRow(i));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Splits rows into (rows with label in `train_classes`, the rest).
pub fn split_by_classes(set: &EmbeddingSet, train_classes: &BTreeSet<u32>) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let present: BTreeSet<u32> = set.labels().iter().copied().collect();
    if let Some(&bad) = train_classes.iter().find(|c| !present.contains(c)) {
        return Err(Error::UnknownClass(bad));
    }
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..set.len()).partition(|&i| train_classes.contains(&set.labels()[i]));
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok((set.select_rows(&train_idx)?, set.select_rows(&test_idx)?))
}
