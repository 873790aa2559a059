//! Shared domain types: datasets, chronological splits, sample ages and
//! sample weights.
//!
//! Time indices are 1-based in the literature but every public operation here
//! speaks in counts. A `SplitSpec` with `train_end = 5` means the first five
//! samples (storage indices `0..5`) form the training set.

use std::ops::Range;

use crate::error::{Error, Result};

/// Aligned feature vectors and scalar labels.
///
/// Features are stored row-major; row `t` is the feature vector of sample `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    /// Builds a dataset from per-sample feature rows and labels.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "ragged features: row {t} has dimension {} but row 0 has {dim}",
                    row.len()
                )));
            }
            features.extend(row);
        }
        Self::from_flat(features, labels, dim)
    }

    /// Builds a dataset from a row-major feature buffer of `labels.len() * dim` entries.
    pub fn from_flat(features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDataset("dataset must hold at least one sample".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidDataset("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::InvalidDataset(format!(
                "feature buffer holds {} values, expected {} x {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(t) = labels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("label {t} is not finite")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "feature {} of row {} is not finite",
                i % dim,
                i / dim
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    /// Number of samples `T`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; a dataset holds at least one sample.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn label(&self, t: usize) -> f64 {
        self.labels[t]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    /// Copies the samples in `range` into a new dataset.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Bounds(format!(
                "slice {range:?} of a dataset with {} samples",
                self.len()
            )));
        }
        Self::from_flat(
            self.features[range.start * self.dim..range.end * self.dim].to_vec(),
            self.labels[range].to_vec(),
            self.dim,
        )
    }
}

/// Chronological train / validation / test partition, expressed as sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    train_end: usize,
    valid_end: usize,
    test_end: usize,
}

impl SplitSpec {
    /// Builds a split from segment end points (1-based inclusive ends, i.e. counts).
    pub fn new(total: usize, train_end: usize, valid_end: usize, test_end: usize) -> Result<Self> {
        if train_end < 1 || train_end >= valid_end || valid_end > test_end || test_end > total {
            return Err(Error::Bounds(format!(
                "split (train_end {train_end}, valid_end {valid_end}, test_end {test_end}) \
                 does not satisfy 1 <= train_end < valid_end <= test_end <= {total}"
            )));
        }
        Ok(Self {
            train_end,
            valid_end,
            test_end,
        })
    }

    /// Index of the last training sample, `t*`; equals the training-set size.
    pub fn train_end(&self) -> usize {
        self.train_end
    }

    pub fn valid_end(&self) -> usize {
        self.valid_end
    }

    pub fn test_end(&self) -> usize {
        self.test_end
    }

    /// Storage indices of the training segment.
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn valid(&self) -> Range<usize> {
        self.train_end..self.valid_end
    }

    pub fn test(&self) -> Range<usize> {
        self.valid_end..self.test_end
    }

    pub fn valid_len(&self) -> usize {
        self.valid_end - self.train_end
    }

    pub fn test_len(&self) -> usize {
        self.test_end - self.valid_end
    }
}

/// Builds the contiguous split `[1, train_end] | valid_len | test_len` over `total` samples.
pub fn make_split(
    total: usize,
    train_end: usize,
    valid_len: usize,
    test_len: usize,
) -> Result<SplitSpec> {
    if train_end == 0 || valid_len == 0 || test_len == 0 {
        return Err(Error::Bounds(format!(
            "segment lengths must be positive (train {train_end}, valid {valid_len}, test {test_len})"
        )));
    }
    let needed = train_end + valid_len + test_len;
    if needed > total {
        return Err(Error::Bounds(format!(
            "{train_end} + {valid_len} + {test_len} = {needed} exceeds the {total} available samples"
        )));
    }
    SplitSpec::new(total, train_end, train_end + valid_len, needed)
}

/// Age of every training sample relative to the last one: `t* - tau`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeVector(Vec<u64>);

impl AgeVector {
    /// Ages `[n - 1, ..., 1, 0]` for `n` consecutive samples ending at the anchor.
    pub fn ending_at_zero(n: usize) -> Self {
        Self((0..n as u64).rev().collect())
    }

    /// Wraps arbitrary ages, e.g. for evaluating a mechanism on a grid.
    /// Ages derived from a split are always strictly decreasing and end in 0.
    pub fn from_ages(ages: Vec<u64>) -> Self {
        Self(ages)
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ages of the training samples of `split`.
pub fn ages_of(split: &SplitSpec) -> AgeVector {
    AgeVector::ending_at_zero(split.train_end())
}

/// Nonnegative per-sample weights of a weighted empirical risk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight {i} = {} is not a finite nonnegative number",
                weights[i]
            )));
        }
        Ok(Self(weights))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Per-sample loss. Squared error is the only loss the closed-form solver supports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    SquaredError,
}

impl LossKind {
    pub fn eval(self, prediction: f64, label: f64) -> f64 {
        match self {
            LossKind::SquaredError => (prediction - label).powi(2),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
