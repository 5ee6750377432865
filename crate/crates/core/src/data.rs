//! Datasets, horizontal/vertical partitioning and a seeded synthetic generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{what}: expected {expected} rows, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sample {row} holds a non-finite feature")]
    NonFinite { row: usize },
    #[error("{what} row {row} is not one-hot")]
    NotOneHot { what: &'static str, row: usize },
    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("private attribute {index} requested but only {available} exist")]
    NoSuchAttribute { index: usize, available: usize },
}

/// Samples with one-hot task labels and private-attribute labels, all row aligned.
///
/// `labels` is `None` for parties that do not hold the task labels (vertical
/// partitioning).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    labels: Option<Matrix>,
    private_attrs: Vec<Matrix>,
    feature_names: Option<Vec<String>>,
}

fn is_one_hot(row: &[f64]) -> bool {
    let mut hot = 0;
    for &v in row {
        if v == 1.0 {
            hot += 1;
        } else if v != 0.0 {
            return false;
        }
    }
    hot == 1
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// One-hot matrix from class indices.
pub fn one_hot_matrix(classes_of: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(classes_of.len(), classes);
    for (i, &c) in classes_of.iter().enumerate() {
        m.row_mut(i)[c] = 1.0;
    }
    m
}

impl Dataset {
    pub fn new(
        samples: Matrix,
        labels: Option<Matrix>,
        private_attrs: Vec<Matrix>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self, DataError> {
        let n = samples.rows();
        for (row, r) in samples.iter_rows().enumerate() {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { row });
            }
        }
        let check = |what: &'static str, m: &Matrix| -> Result<(), DataError> {
            if m.rows() != n {
                return Err(DataError::CountMismatch {
                    what,
                    expected: n,
                    found: m.rows(),
                });
            }
            for (row, r) in m.iter_rows().enumerate() {
                if !is_one_hot(r) {
                    return Err(DataError::NotOneHot { what, row });
                }
            }
            Ok(())
        };
        if let Some(l) = &labels {
            check("labels", l)?;
        }
        for a in &private_attrs {
            check("private attribute", a)?;
        }
        if let Some(names) = &feature_names {
            if names.len() != samples.cols() {
                return Err(DataError::CountMismatch {
                    what: "feature names",
                    expected: samples.cols(),
                    found: names.len(),
                });
            }
        }
        Ok(Self {
            samples,
            labels,
            private_attrs,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> Option<&Matrix> {
        self.labels.as_ref()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.cols())
    }

    /// Class index of every label row.
    pub fn label_classes(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter_rows().map(crate::nn::argmax).collect())
    }

    pub fn private_attrs(&self) -> &[Matrix] {
        &self.private_attrs
    }

    pub fn private_attr(&self, k: usize) -> Result<&Matrix, DataError> {
        self.private_attrs.get(k).ok_or(DataError::NoSuchAttribute {
            index: k,
            available: self.private_attrs.len(),
        })
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: self.labels.as_ref().map(|l| l.select_rows(indices)),
            private_attrs: self.private_attrs.iter().map(|a| a.select_rows(indices)).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Contiguous row range.
    pub fn slice(&self, range: Range<usize>) -> Dataset {
        let idx: Vec<usize> = range.collect();
        self.subset(&idx)
    }

    /// Keeps only the feature columns in `range`; labels and attributes are kept.
    pub fn select_features(&self, range: Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples.select_cols(range.start, range.end),
            labels: self.labels.clone(),
            private_attrs: self.private_attrs.clone(),
            feature_names: self
                .feature_names
                .as_ref()
                .map(|n| n[range.start..range.end].to_vec()),
        }
    }

    /// Replaces the task labels (used to pose new downstream tasks).
    pub fn with_labels(&self, labels: Option<Matrix>) -> Result<Dataset, DataError> {
        Dataset::new(
            self.samples.clone(),
            labels,
            self.private_attrs.clone(),
            self.feature_names.clone(),
        )
    }

    /// Rows in an order drawn from `seed`.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        self.subset(&idx)
    }
}

/// How samples are divided among parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionPlan {
    /// Party `i` receives rows `blocks[i]` of the (optionally shuffled) data set.
    Horizontal {
        blocks: Vec<Range<usize>>,
        shuffle_seed: Option<u64>,
    },
    /// Party `i` receives feature columns `columns[i]` of every row; only
    /// `label_holder` keeps labels and private attributes.
    Vertical {
        columns: Vec<Range<usize>>,
        label_holder: usize,
    },
}

impl PartitionPlan {
    /// `parties` equal contiguous blocks of `per_party` rows after a seeded shuffle.
    pub fn horizontal(parties: usize, per_party: usize, shuffle_seed: Option<u64>) -> Self {
        PartitionPlan::Horizontal {
            blocks: (0..parties).map(|i| i * per_party..(i + 1) * per_party).collect(),
            shuffle_seed,
        }
    }

    /// Blocks of the given sizes, back to back.
    pub fn horizontal_sized(sizes: &[usize], shuffle_seed: Option<u64>) -> Self {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        PartitionPlan::Horizontal {
            blocks,
            shuffle_seed,
        }
    }

    /// Splits `dim` columns among `parties` as evenly as possible; earlier
    /// parties take the remainder (133 over 3 gives 45/44/44).
    pub fn vertical_even(dim: usize, parties: usize, label_holder: usize) -> Self {
        let base = dim / parties.max(1);
        let extra = dim % parties.max(1);
        let mut start = 0;
        let columns = (0..parties)
            .map(|i| {
                let w = base + usize::from(i < extra);
                let r = start..start + w;
                start += w;
                r
            })
            .collect();
        PartitionPlan::Vertical {
            columns,
            label_holder,
        }
    }

    pub fn parties(&self) -> usize {
        match self {
            PartitionPlan::Horizontal { blocks, .. } => blocks.len(),
            PartitionPlan::Vertical { columns, .. } => columns.len(),
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<(), DataError> {
        let (ranges, bound, what) = match self {
            PartitionPlan::Horizontal { blocks, .. } => (blocks, ds.len(), "sample"),
            PartitionPlan::Vertical {
                columns,
                label_holder,
            } => {
                if *label_holder >= columns.len() {
                    return Err(DataError::InvalidPlan(format!(
                        "label holder {label_holder} is not one of {} parties",
                        columns.len()
                    )));
                }
                (columns, ds.feature_dim(), "column")
            }
        };
        if ranges.is_empty() {
            return Err(DataError::InvalidPlan("no parties".into()));
        }
        for (i, r) in ranges.iter().enumerate() {
            if r.start >= r.end {
                return Err(DataError::InvalidPlan(format!("party {i} receives no {what}s")));
            }
            if r.end > bound {
                return Err(DataError::InvalidPlan(format!(
                    "party {i} range {}..{} exceeds {bound} {what}s",
                    r.start, r.end
                )));
            }
        }
        let mut sorted: Vec<&Range<usize>> = ranges.iter().collect();
        sorted.sort_by_key(|r| r.start);
        for w in sorted.windows(2) {
            if w[0].end > w[1].start {
                return Err(DataError::InvalidPlan(format!(
                    "{what} ranges {}..{} and {}..{} overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        if let PartitionPlan::Vertical { .. } = self {
            let covered: usize = ranges.iter().map(|r| r.len()).sum();
            if covered != bound {
                return Err(DataError::InvalidPlan(format!(
                    "vertical plan covers {covered} of {bound} columns"
                )));
            }
        }
        Ok(())
    }
}

/// Splits `ds` according to `plan`.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>, DataError> {
    plan.validate(ds)?;
    match plan {
        PartitionPlan::Horizontal {
            blocks,
            shuffle_seed,
        } => {
            let order: Vec<usize> = match shuffle_seed {
                Some(s) => {
                    let mut idx: Vec<usize> = (0..ds.len()).collect();
                    idx.shuffle(&mut seed::rng(*s));
                    idx
                }
                None => (0..ds.len()).collect(),
            };
            Ok(blocks.iter().map(|b| ds.subset(&order[b.clone()])).collect())
        }
        PartitionPlan::Vertical {
            columns,
            label_holder,
        } => Ok(columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut part = ds.select_features(c.clone());
                if i != *label_holder {
                    part.labels = None;
                    part.private_attrs.clear();
                }
                part
            })
            .collect()),
    }
}

/// Parameters of [`synth_gaussian_clusters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub private_attr_planes: usize,
    pub seed: u64,
    /// Distance scale between cluster centres, in units of the within-cluster
    /// standard deviation.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    4.0
}

impl SynthSpec {
    pub fn new(n: usize, dim: usize, classes: usize, private_attr_planes: usize, seed: u64) -> Self {
        Self {
            n,
            dim,
            classes,
            private_attr_planes,
            seed,
            spread: default_spread(),
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gaussian clusters with binary private attributes.
///
/// The task label is the cluster. Each private attribute is the side of a random
/// hyperplane through the sample's own cluster centre, so attributes are balanced
/// and independent of the task label. Features are min-max scaled to `[0, 1]`.
pub fn synth_gaussian_clusters(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.n == 0 || spec.dim == 0 || spec.classes == 0 {
        return Err(DataError::InvalidParameter(format!(
            "n, dim and classes must be positive (got {}, {}, {})",
            spec.n, spec.dim, spec.classes
        )));
    }
    if !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(DataError::InvalidParameter("spread must be finite and non-negative".into()));
    }
    let mut rng = seed::rng(spec.seed);

    // Centres on a sphere of radius `spread`; keep the most separated of a few draws.
    let mut centres: Vec<Vec<f64>> = Vec::new();
    let mut best_gap = -1.0;
    for _ in 0..64 {
        let cand: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| random_unit(&mut rng, spec.dim).into_iter().map(|v| v * spec.spread).collect())
            .collect();
        let mut gap = f64::INFINITY;
        for a in 0..cand.len() {
            for b in a + 1..cand.len() {
                let d: f64 = cand[a].iter().zip(&cand[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                gap = gap.min(libm::sqrt(d));
            }
        }
        if gap > best_gap {
            best_gap = gap;
            centres = cand;
        }
        if gap >= spec.spread {
            break;
        }
    }
    let planes: Vec<Vec<f64>> = (0..spec.private_attr_planes)
        .map(|_| random_unit(&mut rng, spec.dim))
        .collect();

    let mut samples = Matrix::zeros(spec.n, spec.dim);
    let mut classes = Vec::with_capacity(spec.n);
    let mut attrs: Vec<Vec<usize>> = vec![Vec::with_capacity(spec.n); spec.private_attr_planes];
    for i in 0..spec.n {
        let c = rng.random_range(0..spec.classes);
        let offset: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        for (k, p) in planes.iter().enumerate() {
            let side: f64 = p.iter().zip(&offset).map(|(a, b)| a * b).sum();
            attrs[k].push(usize::from(side >= 0.0));
        }
        for (j, v) in samples.row_mut(i).iter_mut().enumerate() {
            *v = centres[c][j] + offset[j];
        }
        classes.push(c);
    }
    let ranges = samples.column_ranges();
    for i in 0..spec.n {
        for (v, &(lo, hi)) in samples.row_mut(i).iter_mut().zip(&ranges) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Dataset::new(
        samples,
        Some(one_hot_matrix(&classes, spec.classes)),
        attrs.iter().map(|a| one_hot_matrix(a, 2)).collect(),
        None,
    )
}
