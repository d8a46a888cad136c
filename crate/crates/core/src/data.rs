//! Datasets, loaders, normalization, splitting and client partitioning.
//!
//! The partitioner mixes two splits of the same training set. The IID split is
//! a seeded shuffle cut into `n` contiguous shards; the non-IID split is the
//! training set stable-sorted by label and cut the same way. With
//! heterogeneity `h`, client `i` owns the first `⌊h·k_i⌋` items of its sorted
//! shard and fills the rest from its IID shard. Items already owned through
//! some client's sorted portion are skipped; clients whose IID shard runs
//! short take the leftovers of the others in index order, so the result is
//! always a disjoint cover with sizes that differ by at most one.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Targets, Task};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, targets: Targets) -> Result<Self> {
        let name = name.into();
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset(name));
        }
        if features.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: targets.len(),
                context: "dataset target rows",
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dataset {name} contains non-finite features"
            )));
        }
        if let Targets::Labels { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::InvalidConfig(format!(
                    "label {bad} outside [0, {classes})"
                )));
            }
        }
        Ok(Self {
            name,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    /// Number of classes, or the target dimension for regression.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Continuous(y) => y.ncols(),
            Targets::Labels { classes, .. } => *classes,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Continuous(_) => None,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), rows),
            targets: self.targets.select(rows),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.features.select(Axis(0), rows),
            targets: self.targets.select(rows),
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            targets: self.targets.clone(),
        }
    }

    /// Concatenate datasets with identical schemas.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyDataset("no parts to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidConfig(format!("feature widths differ: {e}")))?;
        let targets = match &first.targets {
            Targets::Continuous(_) => {
                let mut ys = Vec::new();
                for d in parts {
                    match &d.targets {
                        Targets::Continuous(y) => ys.push(y.view()),
                        _ => return Err(Error::InvalidConfig("mixed target kinds".into())),
                    }
                }
                Targets::Continuous(
                    ndarray::concatenate(Axis(0), &ys)
                        .map_err(|e| Error::InvalidConfig(format!("target widths differ: {e}")))?,
                )
            }
            Targets::Labels { classes, .. } => {
                let mut all = Vec::new();
                for d in parts {
                    match &d.targets {
                        Targets::Labels { labels, .. } => all.extend_from_slice(labels),
                        _ => return Err(Error::InvalidConfig("mixed target kinds".into())),
                    }
                }
                Targets::Labels {
                    labels: all,
                    classes: *classes,
                }
            }
        };
        Dataset::new(first.name.clone(), features, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Zero-based feature column indices; `None` means every column except the target.
    pub features: Option<Vec<usize>>,
    pub target: usize,
    pub task: Task,
    pub has_header: bool,
    pub delimiter: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_skipped: usize,
}

/// Parse a delimited text file. Rows with missing or unparseable fields are
/// skipped and counted; a column index beyond the header width is an error.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidConfig(format!("{}: {other:?}", path.display())),
        })?;

    let mut width = None;
    if schema.has_header {
        width = Some(reader.headers()?.len());
    }

    let mut report = LoadReport::default();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut feature_cols = schema.features.clone();

    for record in reader.records() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.rows_skipped += 1;
                continue;
            }
        };
        let w = *width.get_or_insert(record.len());
        let cols = feature_cols.get_or_insert_with(|| (0..w).filter(|&c| c != schema.target).collect());
        if let Some(&bad) = cols
            .iter()
            .chain(std::iter::once(&schema.target))
            .find(|&&c| c >= w)
        {
            return Err(Error::ColumnOutOfRange {
                path: path.to_path_buf(),
                column: bad,
                width: w,
            });
        }
        let parse = |c: usize| -> Option<f64> {
            record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let feats: Option<Vec<f64>> = cols.iter().map(|&c| parse(c)).collect();
        let target = parse(schema.target);
        match (feats, target) {
            (Some(f), Some(t)) => {
                if schema.task == Task::Classification && (t < 0.0 || t.fract() != 0.0) {
                    report.rows_skipped += 1;
                    continue;
                }
                rows.push(f);
                targets.push(t);
            }
            _ => report.rows_skipped += 1,
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no parseable rows",
            path.display()
        )));
    }
    let d = rows[0].len();
    let features = Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect())
        .expect("rows share width");
    let targets = match schema.task {
        Task::Regression => {
            let n = targets.len();
            Targets::Continuous(Array2::from_shape_vec((n, 1), targets).expect("column"))
        }
        Task::Classification => {
            let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
            Targets::Labels { labels, classes }
        }
    };
    Ok((Dataset::new(name, features, targets)?, report))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            message: format!("file too short for header field at byte {at}"),
        })
}

/// Load an IDX image/label pair (the MNIST distribution format).
/// Pixels are scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let idx_err = |path: &Path, message: String| Error::Idx {
        path: path.to_path_buf(),
        message,
    };

    let magic = read_be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(
            images_path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let magic = read_be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(
            labels_path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(&images, 4, images_path)? as usize;
    let rows = read_be_u32(&images, 8, images_path)? as usize;
    let cols = read_be_u32(&images, 12, images_path)? as usize;
    let n_labels = read_be_u32(&labels, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(idx_err(labels_path, format!("{n_labels} labels for {n} images")));
    }
    let d = rows * cols;
    let need = 16 + n * d;
    if images.len() != need {
        return Err(idx_err(
            images_path,
            format!("expected {need} bytes, found {}", images.len()),
        ));
    }
    if labels.len() != 8 + n {
        return Err(idx_err(
            labels_path,
            format!("expected {} bytes, found {}", 8 + n, labels.len()),
        ));
    }
    let pixels: Vec<f64> = images[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let features = Array2::from_shape_vec((n, d), pixels).expect("sized above");
    let labels: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, features, Targets::Labels { labels, classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Present for regression datasets only.
    pub target_mean: Option<Vec<f64>>,
    pub target_std: Option<Vec<f64>>,
}

fn column_stats(m: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean: Array1<f64> = m.mean_axis(Axis(0)).expect("nonempty");
    let std: Vec<f64> = m
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|&s| if s > 1e-12 { s } else { 1.0 })
        .collect();
    (mean.to_vec(), std)
}

fn standardize(m: &Array2<f64>, mean: &[f64], std: &[f64]) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        for ((v, mu), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - mu) / s;
        }
    }
    out
}

/// Population (ddof = 0) z-score statistics; constant columns get std 1.
pub fn fit_normalizer(train: &Dataset) -> NormalizerStats {
    let (feature_mean, feature_std) = column_stats(&train.features);
    let (target_mean, target_std) = match &train.targets {
        Targets::Continuous(y) => {
            let (m, s) = column_stats(y);
            (Some(m), Some(s))
        }
        Targets::Labels { .. } => (None, None),
    };
    NormalizerStats {
        feature_mean,
        feature_std,
        target_mean,
        target_std,
    }
}

pub fn apply_normalizer(stats: &NormalizerStats, ds: &Dataset) -> Result<Dataset> {
    if ds.dim() != stats.feature_mean.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.feature_mean.len(),
            got: ds.dim(),
            context: "normalizer feature count",
        });
    }
    let features = standardize(&ds.features, &stats.feature_mean, &stats.feature_std);
    let targets = match (&ds.targets, &stats.target_mean, &stats.target_std) {
        (Targets::Continuous(y), Some(m), Some(s)) => {
            if y.ncols() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    got: y.ncols(),
                    context: "normalizer target count",
                });
            }
            Targets::Continuous(standardize(y, m, s))
        }
        (t @ Targets::Labels { .. }, None, None) => t.clone(),
        _ => {
            return Err(Error::InvalidConfig(
                "normalizer was fitted on a dataset of a different task".into(),
            ))
        }
    };
    Dataset::new(ds.name.clone(), features, targets)
}

/// Seeded shuffle followed by a cut; the test part holds `round(N·f)` rows.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, test_idx) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} leaves an empty side for N = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub heterogeneity: f64,
    pub seed: u64,
}

/// Client index sets over the training set, plus how many items of each came
/// from the label-sorted shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub non_iid_counts: Vec<usize>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    pub fn materialize(&self, ds: &Dataset) -> Vec<Dataset> {
        self.client_indices
            .iter()
            .enumerate()
            .map(|(i, idx)| {
                let mut d = ds.subset(idx);
                d.name = format!("{}-client{i}", ds.name);
                d
            })
            .collect()
    }
}

fn shard_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let b = (start, start + len);
            start += len;
            b
        })
        .collect()
}

pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let n = ds.len();
    let clients = spec.n_clients;
    if clients == 0 {
        return Err(Error::InvalidConfig("n_clients must be positive".into()));
    }
    if clients > n {
        return Err(Error::TooManyClients { items: n, clients });
    }
    let h = spec.heterogeneity;
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "heterogeneity must lie in [0, 1], got {h}"
        )));
    }
    if h > 0.0 && ds.task() == Task::Regression {
        return Err(Error::HeterogeneousRegression(h));
    }

    let bounds = shard_bounds(n, clients);
    let mut iid: Vec<usize> = (0..n).collect();
    iid.shuffle(&mut rng_from_seed(spec.seed));

    let mut sorted: Vec<usize> = (0..n).collect();
    if let Some(labels) = ds.labels() {
        sorted.sort_by_key(|&i| labels[i]);
    }

    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut client_indices: Vec<Vec<usize>> = Vec::with_capacity(clients);
    let mut non_iid_counts = Vec::with_capacity(clients);
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        let k = hi - lo;
        let take = ((h * k as f64).floor() as usize).min(k);
        let head = &sorted[lo..lo + take];
        for &i in head {
            owner[i] = Some(c);
        }
        client_indices.push(head.to_vec());
        non_iid_counts.push(take);
    }

    let mut leftovers = Vec::new();
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        let k = hi - lo;
        for &i in &iid[lo..hi] {
            if owner[i].is_some() {
                continue;
            }
            if client_indices[c].len() < k {
                owner[i] = Some(c);
                client_indices[c].push(i);
            } else {
                leftovers.push(i);
            }
        }
    }
    leftovers.sort_unstable();
    let mut pool = leftovers.into_iter();
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        while client_indices[c].len() < hi - lo {
            let i = pool.next().expect("leftover pool covers every shortfall");
            owner[i] = Some(c);
            client_indices[c].push(i);
        }
    }
    debug_assert!(pool.next().is_none());

    Ok(Partition {
        client_indices,
        non_iid_counts,
    })
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds, spec)?.materialize(ds))
}

/// Per-class counts.
pub fn class_histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Mean total-variation distance between each client's label histogram and
/// the pooled histogram.
pub fn mean_label_tv(clients: &[Dataset]) -> f64 {
    let classes = match clients.first().map(|c| &c.targets) {
        Some(Targets::Labels { classes, .. }) => *classes,
        _ => return 0.0,
    };
    let hists: Vec<Vec<usize>> = clients
        .iter()
        .map(|c| class_histogram(c.labels().unwrap_or(&[]), classes))
        .collect();
    let total: usize = hists.iter().flatten().sum();
    let mut global = vec![0usize; classes];
    for h in &hists {
        for (g, v) in global.iter_mut().zip(h) {
            *g += v;
        }
    }
    let tv: f64 = hists
        .iter()
        .map(|h| {
            let k: usize = h.iter().sum();
            0.5 * h
                .iter()
                .zip(&global)
                .map(|(&a, &g)| (a as f64 / k as f64 - g as f64 / total as f64).abs())
                .sum::<f64>()
        })
        .sum();
    tv / clients.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressionKind {
    /// `y = sin(2πx) + ε`, `x ~ U[-1, 1]`.
    Sine,
    /// `y = 2x - 0.5 + ε`, `x ~ U[-1, 1]`.
    Linear,
}

pub fn synth_regression(kind: RegressionKind, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("synthetic regression with N = 0".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.0..=1.0);
        let clean = match kind {
            RegressionKind::Sine => (2.0 * std::f64::consts::PI * x).sin(),
            RegressionKind::Linear => 2.0 * x - 0.5,
        };
        let eps: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(clean + noise_std * eps);
    }
    let name = match kind {
        RegressionKind::Sine => "sine",
        RegressionKind::Linear => "linear",
    };
    Dataset::new(
        name,
        Array2::from_shape_vec((n, 1), xs).expect("column"),
        Targets::Continuous(Array2::from_shape_vec((n, 1), ys).expect("column")),
    )
}

/// Cluster centres used by [`synth_classification`].
///
/// When `d ≥ K` the centres are the scaled simplex vertices
/// `(separation / √2)·e_k`, so every pair sits `separation` apart. For `d < K`
/// they are spread evenly on a circle in the first two coordinates with
/// neighbouring centres `separation` apart.
pub fn blob_centres(classes: usize, dim: usize, separation: f64) -> Result<Array2<f64>> {
    if classes < 2 || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "blobs need K ≥ 2 and d ≥ 1, got K = {classes}, d = {dim}"
        )));
    }
    let mut centres = Array2::zeros((classes, dim));
    if dim >= classes {
        let s = separation / std::f64::consts::SQRT_2;
        for k in 0..classes {
            centres[[k, k]] = s;
        }
    } else if dim >= 2 {
        let step = 2.0 * std::f64::consts::PI / classes as f64;
        let radius = separation / (2.0 * (step / 2.0).sin());
        for k in 0..classes {
            centres[[k, 0]] = radius * (k as f64 * step).cos();
            centres[[k, 1]] = radius * (k as f64 * step).sin();
        }
    } else {
        for k in 0..classes {
            centres[[k, 0]] = separation * k as f64;
        }
    }
    Ok(centres)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassificationKind {
    GaussianBlobs,
}

/// Isotropic unit-variance Gaussian clusters; labels cycle `0, 1, …, K-1` so
/// classes are balanced whenever `K` divides `N`.
pub fn synth_classification(
    kind: ClassificationKind,
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let ClassificationKind::GaussianBlobs = kind;
    if n == 0 {
        return Err(Error::EmptyDataset("synthetic blobs with N = 0".into()));
    }
    let centres = blob_centres(classes, dim, separation)?;
    let mut rng = rng_from_seed(seed);
    let mut features = Array2::zeros((n, dim));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        for (v, c) in row.iter_mut().zip(centres.row(label)) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = c + eps;
        }
    }
    Dataset::new("blobs", features, Targets::Labels { labels, classes })
}
