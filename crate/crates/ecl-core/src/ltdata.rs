//! Long-tailed data construction.
//!
//! Builds exponential class-count profiles, empirical label priors,
//! Many/Medium/Few groupings, and synthetic Gaussian-blob datasets whose
//! train split follows the profile while the test split stays balanced.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EclError, Result};
use crate::rng::{mix_seed, rng_from, stream};

/// Parameters of an exponential class-count profile.
///
/// `gamma` is the imbalance factor: the ratio between the most and the least
/// frequent class counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub n_max: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn new(num_classes: usize, n_max: usize, gamma: f64, seed: u64) -> Result<Self> {
        let spec = Self { num_classes, n_max, gamma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(EclError::InvalidInput(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.n_max < 1 {
            return Err(EclError::InvalidInput("n_max must be >= 1".into()));
        }
        if !(self.gamma >= 1.0) {
            return Err(EclError::InvalidInput(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-class training counts `n_i = max(1, round(n_max * gamma^(-i/(C-1))))`.
///
/// Counts are non-increasing and `counts[0] / counts[C-1]` reproduces `gamma`
/// up to rounding.
pub fn make_class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let c = spec.num_classes;
    let mut counts = Vec::with_capacity(c);
    for i in 0..c {
        let exponent = -(i as f64) / (c as f64 - 1.0);
        let raw = spec.n_max as f64 * spec.gamma.powf(exponent);
        counts.push(raw.round().max(1.0) as usize);
    }
    // Rounding cannot break monotonicity for gamma >= 1, but keep the
    // invariant explicit.
    debug_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    Ok(counts)
}

/// Empirical label distribution `p[i] = counts[i] / sum(counts)`.
pub fn compute_prior(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.len() < 2 {
        return Err(EclError::InvalidInput(format!(
            "need at least 2 classes, got {}",
            counts.len()
        )));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(EclError::InvalidInput("class counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Source and target label priors plus the compensation scale for the
/// balanced cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub p_source: Vec<f64>,
    pub p_target: Vec<f64>,
    pub tau_bc: f64,
}

impl ClassPrior {
    pub fn new(p_source: Vec<f64>, p_target: Vec<f64>, tau_bc: f64) -> Result<Self> {
        if p_source.len() != p_target.len() || p_source.len() < 2 {
            return Err(EclError::InvalidInput(
                "priors must have equal length >= 2".into(),
            ));
        }
        for p in [&p_source, &p_target] {
            if p.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(EclError::InvalidInput(
                    "prior entries must be strictly positive".into(),
                ));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(EclError::InvalidInput(format!(
                    "prior must sum to 1 within 1e-9, got {sum}"
                )));
            }
        }
        if !(tau_bc >= 0.0) {
            return Err(EclError::InvalidInput("tau_bc must be >= 0".into()));
        }
        Ok(Self { p_source, p_target, tau_bc })
    }

    /// Empirical source prior from train counts with a uniform target prior.
    pub fn from_counts(counts: &[usize], tau_bc: f64) -> Result<Self> {
        let p_source = compute_prior(counts)?;
        let c = counts.len();
        Self::new(p_source, vec![1.0 / c as f64; c], tau_bc)
    }

    /// Uniform source and target priors (the bias vanishes for any tau).
    pub fn balanced(num_classes: usize, tau_bc: f64) -> Result<Self> {
        let u = vec![1.0 / num_classes as f64; num_classes];
        Self::new(u.clone(), u, tau_bc)
    }

    pub fn num_classes(&self) -> usize {
        self.p_source.len()
    }

    /// Per-class statistical bias `log p_s(y) - log p_t(y)`.
    pub fn bias(&self) -> Vec<f64> {
        self.p_source
            .iter()
            .zip(&self.p_target)
            .map(|(&s, &t)| s.ln() - t.ln())
            .collect()
    }
}

/// Many/Medium/Few class partition by train count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub many: BTreeSet<usize>,
    pub medium: BTreeSet<usize>,
    pub few: BTreeSet<usize>,
}

/// Buckets classes by train count: Many `> 100`, Medium `[20, 100]`,
/// Few `< 20`. The three sets partition the class indices.
pub fn group_classes(counts: &[usize]) -> Result<GroupAssignment> {
    if counts.is_empty() {
        return Err(EclError::InvalidInput("counts must be non-empty".into()));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(EclError::InvalidInput("class counts must be positive".into()));
    }
    let mut groups = GroupAssignment {
        many: BTreeSet::new(),
        medium: BTreeSet::new(),
        few: BTreeSet::new(),
    };
    for (i, &c) in counts.iter().enumerate() {
        if c > 100 {
            groups.many.insert(i);
        } else if c >= 20 {
            groups.medium.insert(i);
        } else {
            groups.few.insert(i);
        }
    }
    Ok(groups)
}

/// Synthetic dataset of isotropic unit-variance Gaussian blobs, one per
/// class. The train split follows the long-tailed counts; the test split is
/// balanced. Fully determined by `(spec, feature_dim, class_separation,
/// test_per_class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub counts: Vec<usize>,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
}

impl SyntheticDataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }
}

/// Builds the blob dataset. Class means are drawn from the seed and rescaled
/// so every pair is at least `class_separation` apart; samples add standard
/// normal noise around the class mean.
pub fn build_synthetic_lt_dataset(
    spec: &LongTailSpec,
    feature_dim: usize,
    class_separation: f64,
    test_per_class: usize,
) -> Result<SyntheticDataset> {
    if feature_dim < 2 {
        return Err(EclError::InvalidInput(format!(
            "feature_dim must be >= 2, got {feature_dim}"
        )));
    }
    if !(class_separation > 0.0) {
        return Err(EclError::InvalidInput(
            "class_separation must be positive".into(),
        ));
    }
    let counts = make_class_counts(spec)?;
    let c = spec.num_classes;

    // Class means live on a sphere whose radius grows only as far as needed
    // to fit all classes at the requested separation; this keeps coordinate
    // magnitudes comparable to the separation itself.
    let mut rng = rng_from(&[spec.seed, stream::MEANS]);
    let mut means = Array2::<f64>::zeros((c, feature_dim));
    let mut radius = class_separation;
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < c {
        let mut candidate = Array1::<f64>::zeros(feature_dim);
        let mut norm = 0.0;
        while norm == 0.0 {
            for x in candidate.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            norm = candidate.dot(&candidate).sqrt();
        }
        candidate.mapv_inplace(|x| x * radius / norm);
        let ok = (0..placed).all(|j| {
            let d: f64 = means
                .row(j)
                .iter()
                .zip(candidate.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d >= class_separation
        });
        if ok {
            means.row_mut(placed).assign(&candidate);
            placed += 1;
        } else {
            attempts += 1;
            if attempts % 50 == 0 {
                radius *= 1.1;
            }
        }
    }

    let sample_split = |tag: u64, per_class: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let total: usize = per_class.iter().sum();
        let mut x = Array2::<f64>::zeros((total, feature_dim));
        let mut y = Vec::with_capacity(total);
        let mut rng = rng_from(&[spec.seed, tag]);
        let mut row = 0;
        for (class, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                for (dst, &m) in x.row_mut(row).iter_mut().zip(means.row(class)) {
                    let noise: f64 = rng.sample(StandardNormal);
                    *dst = m + noise;
                }
                y.push(class);
                row += 1;
            }
        }
        (x, y)
    };

    let (train_x, train_y) = sample_split(stream::TRAIN_SAMPLES, &counts);
    let test_counts = vec![test_per_class; c];
    let (test_x, test_y) = sample_split(stream::TEST_SAMPLES, &test_counts);

    Ok(SyntheticDataset {
        num_classes: c,
        feature_dim,
        counts,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

/// A batch of train rows with two independently jittered views.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewBatch {
    pub view_a: Array2<f64>,
    pub view_b: Array2<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl TwoViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gathers the given train rows and produces two views with independent
/// additive Gaussian jitter of scale `jitter_sigma`.
pub fn two_view_batch(
    dataset: &SyntheticDataset,
    batch_indices: &[usize],
    jitter_sigma: f64,
    seed: u64,
) -> Result<TwoViewBatch> {
    if !(jitter_sigma >= 0.0) {
        return Err(EclError::InvalidInput("jitter_sigma must be >= 0".into()));
    }
    let n = batch_indices.len();
    let d = dataset.feature_dim;
    let mut base = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (r, &idx) in batch_indices.iter().enumerate() {
        if idx >= dataset.train_len() {
            return Err(EclError::InvalidInput(format!(
                "train index {idx} out of range ({} rows)",
                dataset.train_len()
            )));
        }
        base.row_mut(r).assign(&dataset.train_x.row(idx));
        labels.push(dataset.train_y[idx]);
    }
    let (view_a, view_b) = if jitter_sigma == 0.0 {
        (base.clone(), base.clone())
    } else {
        let mut rng = rng_from(&[seed, stream::JITTER]);
        let mut jittered = || {
            let mut v = base.clone();
            for x in v.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *x += jitter_sigma * noise;
            }
            v
        };
        let a = jittered();
        let b = jittered();
        (a, b)
    };
    Ok(TwoViewBatch {
        view_a,
        view_b,
        labels,
        indices: batch_indices.to_vec(),
    })
}

/// Counts profile as exported next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsProfile {
    pub counts: Vec<usize>,
    pub gamma: f64,
}

impl CountsProfile {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("counts profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EclError::Data(format!("counts json: {e}")))
    }
}

const DATASET_FORMAT: &str = "ecl-dataset v1";

/// Serializes the dataset as `ecl-dataset v1` CSV: a header line with the
/// class count and feature dimension, then one `split,class,features...` row
/// per sample.
pub fn write_dataset_csv(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "{DATASET_FORMAT}, C={}, d={}",
        dataset.num_classes, dataset.feature_dim
    )
    .expect("write to string");
    let mut write_rows = |split: &str, x: &ArrayView2<f64>, y: &[usize]| {
        for (row, &label) in x.rows().into_iter().zip(y) {
            out.push_str(split);
            out.push(',');
            out.push_str(&label.to_string());
            for v in row.iter() {
                out.push(',');
                write!(out, "{v}").expect("write to string");
            }
            out.push('\n');
        }
    };
    write_rows("train", &dataset.train_x.view(), &dataset.train_y);
    write_rows("test", &dataset.test_x.view(), &dataset.test_y);
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an `ecl-dataset v1` CSV back into memory. Train counts are
/// recomputed from the rows.
pub fn read_dataset_csv(path: &Path) -> Result<SyntheticDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EclError::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| EclError::Data("empty dataset file".into()))?;
    let (num_classes, feature_dim) = parse_dataset_header(header)?;

    let mut train_rows: Vec<f64> = Vec::new();
    let mut train_y = Vec::new();
    let mut test_rows: Vec<f64> = Vec::new();
    let mut test_y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let split = fields.next().unwrap_or_default();
        let class: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| EclError::Data(format!("bad class on line {}", lineno + 2)))?;
        if class >= num_classes {
            return Err(EclError::Data(format!(
                "class {class} out of range on line {}",
                lineno + 2
            )));
        }
        let feats: Vec<f64> = fields
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| EclError::Data(format!("bad feature on line {}: {e}", lineno + 2)))?;
        if feats.len() != feature_dim {
            return Err(EclError::Data(format!(
                "expected {feature_dim} features, got {} on line {}",
                feats.len(),
                lineno + 2
            )));
        }
        match split {
            "train" => {
                train_rows.extend(feats);
                train_y.push(class);
            }
            "test" => {
                test_rows.extend(feats);
                test_y.push(class);
            }
            other => {
                return Err(EclError::Data(format!(
                    "unknown split '{other}' on line {}",
                    lineno + 2
                )))
            }
        }
    }
    let train_x = Array2::from_shape_vec((train_y.len(), feature_dim), train_rows)
        .map_err(|e| EclError::Data(format!("train shape: {e}")))?;
    let test_x = Array2::from_shape_vec((test_y.len(), feature_dim), test_rows)
        .map_err(|e| EclError::Data(format!("test shape: {e}")))?;
    let mut counts = vec![0usize; num_classes];
    for &y in &train_y {
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(EclError::Data("a class has no train rows".into()));
    }
    Ok(SyntheticDataset {
        num_classes,
        feature_dim,
        counts,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

fn parse_dataset_header(header: &str) -> Result<(usize, usize)> {
    let bad = || EclError::Data(format!("bad dataset header: '{header}'"));
    let rest = header.strip_prefix(DATASET_FORMAT).ok_or_else(bad)?;
    let mut c = None;
    let mut d = None;
    for part in rest.split(',') {
        let part = part.trim();
        if let Some(v) = part.strip_prefix("C=") {
            c = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("d=") {
            d = v.parse().ok();
        }
    }
    match (c, d) {
        (Some(c), Some(d)) if c >= 2 && d >= 2 => Ok((c, d)),
        _ => Err(bad()),
    }
}

/// Seed for the jitter of a given epoch/batch, shared by every trainer so
/// batch streams do not depend on the expert count.
pub fn batch_jitter_seed(root_seed: u64, epoch: usize, batch: usize) -> u64 {
    mix_seed(&[root_seed, stream::JITTER, epoch as u64, batch as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(c: usize, n_max: usize, gamma: f64) -> LongTailSpec {
        LongTailSpec { num_classes: c, n_max, gamma, seed: 7 }
    }

    #[test]
    fn counts_balanced_case() {
        assert_eq!(
            make_class_counts(&spec(5, 100, 1.0)).unwrap(),
            vec![100, 100, 100, 100, 100]
        );
    }

    #[test]
    fn counts_worked_examples() {
        assert_eq!(make_class_counts(&spec(3, 100, 100.0)).unwrap(), vec![100, 10, 1]);
        assert_eq!(make_class_counts(&spec(2, 500, 100.0)).unwrap(), vec![500, 5]);
    }

    #[test]
    fn counts_rejects_bad_specs() {
        assert!(make_class_counts(&spec(1, 100, 10.0)).is_err());
        assert!(make_class_counts(&spec(3, 0, 10.0)).is_err());
        assert!(make_class_counts(&spec(3, 100, 0.5)).is_err());
        assert!(make_class_counts(&spec(3, 100, f64::NAN)).is_err());
    }

    #[test]
    fn prior_uniform_and_exact() {
        assert_eq!(compute_prior(&[1, 1]).unwrap(), vec![0.5, 0.5]);
        let p = compute_prior(&[100, 10, 1]).unwrap();
        assert_eq!(p, vec![100.0 / 111.0, 10.0 / 111.0, 1.0 / 111.0]);
        assert!(compute_prior(&[5]).is_err());
        assert!(compute_prior(&[3, 0]).is_err());
    }

    #[test]
    fn class_prior_validation() {
        assert!(ClassPrior::new(vec![0.5, 0.5], vec![0.6, 0.4], 1.0).is_ok());
        assert!(ClassPrior::new(vec![0.5, 0.6], vec![0.5, 0.5], 1.0).is_err());
        assert!(ClassPrior::new(vec![1.0, 0.0], vec![0.5, 0.5], 1.0).is_err());
        assert!(ClassPrior::new(vec![0.5, 0.5], vec![0.5, 0.5], -0.1).is_err());
    }

    #[test]
    fn grouping_worked_examples() {
        let g = group_classes(&[500, 150, 100, 50, 20, 19, 5]).unwrap();
        assert_eq!(g.many, BTreeSet::from([0, 1]));
        assert_eq!(g.medium, BTreeSet::from([2, 3, 4]));
        assert_eq!(g.few, BTreeSet::from([5, 6]));

        let g = group_classes(&[50, 50, 50]).unwrap();
        assert!(g.many.is_empty() && g.few.is_empty());
        assert_eq!(g.medium.len(), 3);

        let g = group_classes(&[101, 100]).unwrap();
        assert_eq!(g.many, BTreeSet::from([0]));
        assert_eq!(g.medium, BTreeSet::from([1]));
    }

    #[test]
    fn dataset_sizes_and_determinism() {
        let s = spec(3, 100, 100.0);
        let ds = build_synthetic_lt_dataset(&s, 4, 3.0, 20).unwrap();
        assert_eq!(ds.counts, vec![100, 10, 1]);
        assert_eq!(ds.train_len(), 111);
        assert_eq!(ds.test_len(), 60);
        let ds2 = build_synthetic_lt_dataset(&s, 4, 3.0, 20).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn dataset_balanced_case() {
        let ds = build_synthetic_lt_dataset(&spec(4, 30, 1.0), 5, 2.0, 50).unwrap();
        assert_eq!(ds.counts, vec![30; 4]);
        assert_eq!(ds.test_len(), 200);
    }

    #[test]
    fn dataset_means_respect_separation() {
        let ds = build_synthetic_lt_dataset(&spec(6, 10, 2.0), 3, 5.0, 4).unwrap();
        // Estimate per-class means from the balanced test split.
        let c = ds.num_classes;
        let mut means = Array2::<f64>::zeros((c, ds.feature_dim));
        let mut n = vec![0.0; c];
        for (row, &y) in ds.test_x.rows().into_iter().zip(&ds.test_y) {
            for (dst, &v) in means.row_mut(y).iter_mut().zip(row) {
                *dst += v;
            }
            n[y] += 1.0;
        }
        for (mut row, n) in means.rows_mut().into_iter().zip(n) {
            row.mapv_inplace(|v| v / n);
        }
        for i in 0..c {
            for j in (i + 1)..c {
                let d: f64 = means
                    .row(i)
                    .iter()
                    .zip(means.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                // Sample means wobble around the true means (4 samples, unit
                // variance), so test against a slack bound.
                assert!(d > 2.5, "classes {i},{j} too close: {d}");
            }
        }
    }

    #[test]
    fn dataset_rejects_bad_inputs() {
        let s = spec(3, 10, 2.0);
        assert!(build_synthetic_lt_dataset(&s, 1, 2.0, 5).is_err());
        assert!(build_synthetic_lt_dataset(&s, 4, 0.0, 5).is_err());
    }

    #[test]
    fn two_view_zero_jitter_and_determinism() {
        let ds = build_synthetic_lt_dataset(&spec(3, 20, 2.0), 4, 3.0, 5).unwrap();
        let b = two_view_batch(&ds, &[0, 5, 10], 0.0, 1).unwrap();
        assert_eq!(b.view_a, b.view_b);
        assert_eq!(b.view_a.row(0), ds.train_x.row(0));

        let b1 = two_view_batch(&ds, &[0, 1, 2], 0.3, 9).unwrap();
        let b2 = two_view_batch(&ds, &[0, 1, 2], 0.3, 9).unwrap();
        assert_eq!(b1, b2);
        assert_ne!(b1.view_a, b1.view_b);

        assert!(two_view_batch(&ds, &[10_000], 0.1, 1).is_err());
    }

    #[test]
    fn two_view_jitter_magnitude() {
        // Mean |view - x| per coordinate estimates the folded-normal mean
        // sigma * sqrt(2/pi).
        let ds = build_synthetic_lt_dataset(&spec(3, 200, 1.0), 8, 3.0, 5).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let sigma = 0.1;
        let mut acc = 0.0;
        let mut count = 0.0;
        for s in 0..30 {
            let b = two_view_batch(&ds, &idx, sigma, s).unwrap();
            for (row, &i) in b.view_a.rows().into_iter().zip(&b.indices) {
                for (v, x) in row.iter().zip(ds.train_x.row(i)) {
                    acc += (v - x).abs();
                    count += 1.0;
                }
            }
        }
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let got = acc / count;
        assert!((got - expected).abs() < 0.005, "got {got}, expected {expected}");
    }

    #[test]
    fn csv_round_trip() {
        let ds = build_synthetic_lt_dataset(&spec(3, 15, 3.0), 4, 2.5, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        write_dataset_csv(&ds, &path).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "not a dataset\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
        std::fs::write(&path, "ecl-dataset v1, C=2, d=2\ntrain,5,0.0,0.0\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
    }

    #[test]
    fn counts_json_round_trip() {
        let p = CountsProfile { counts: vec![100, 10, 1], gamma: 100.0 };
        let back = CountsProfile::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
    }

    proptest! {
        #[test]
        fn counts_non_increasing_and_ratio(
            c in 2usize..40,
            n_max in 1usize..2000,
            gamma in 1.0f64..500.0,
        ) {
            let counts = make_class_counts(&spec(c, n_max, gamma)).unwrap();
            prop_assert_eq!(counts.len(), c);
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(counts[0], n_max.max(1));
            let last = counts[c - 1] as f64;
            let ratio = counts[0] as f64 / last;
            prop_assert!(ratio >= gamma * (1.0 - 2.0 / last) - 1e-9);
            prop_assert!(ratio <= gamma * (1.0 + 2.0 / last) + 1e-9);
        }

        #[test]
        fn prior_sums_and_preserves_order(counts in proptest::collection::vec(1usize..5000, 2..30)) {
            let p = compute_prior(&counts).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in 1..p.len() {
                prop_assert_eq!(counts[i - 1] >= counts[i], p[i - 1] >= p[i]);
            }
        }

        #[test]
        fn grouping_partitions(counts in proptest::collection::vec(1usize..300, 1..40)) {
            let g = group_classes(&counts).unwrap();
            let mut all: Vec<usize> = g.many.iter().chain(&g.medium).chain(&g.few).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
        }
    }
}
