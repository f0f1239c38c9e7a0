//! Labeled datasets, synthetic gaussian mixtures and Dirichlet non-IID partitioning.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};

pub const BINARY_MAGIC: &[u8; 4] = b"FDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
    split: Option<Vec<Split>>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
            split: None,
        })
    }

    pub fn with_split_tags(mut self, split: Vec<Split>) -> Result<Self> {
        if split.len() != self.len() {
            return Err(Error::Data(format!(
                "{} split tags for {} samples",
                split.len(),
                self.len()
            )));
        }
        self.split = Some(split);
        Ok(self)
    }

    /// Stratified random train/test tags: per class, `round(fraction · n_c)` samples go to test.
    pub fn with_random_split(self, test_fraction: f64, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction {test_fraction} not in [0,1)"
            )));
        }
        let mut tags = vec![Split::Train; self.len()];
        for class_idx in self.indices_by_class(0..self.len()) {
            let mut idx = class_idx;
            rng.shuffle(&mut idx);
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..n_test] {
                tags[i] = Split::Test;
            }
        }
        self.with_split_tags(tags)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_tags(&self) -> Option<&[Split]> {
        self.split.as_deref()
    }

    /// Untagged datasets count every sample as training data.
    pub fn train_indices(&self) -> Vec<usize> {
        match &self.split {
            None => (0..self.len()).collect(),
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == Split::Train).collect(),
        }
    }

    pub fn test_indices(&self) -> Vec<usize> {
        match &self.split {
            None => Vec::new(),
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == Split::Test).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self
                .split
                .as_ref()
                .map(|tags| indices.iter().map(|&i| tags[i]).collect()),
        }
    }

    /// Keeps only samples whose label is in `keep`, relabeled to `0..keep.len()` in order.
    pub fn select_classes(&self, keep: &[usize]) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&idx);
        for y in out.labels.iter_mut() {
            *y = keep.iter().position(|k| k == y).expect("filtered above");
        }
        out.classes = keep.len();
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn present_classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    fn indices_by_class(&self, indices: impl Iterator<Item = usize>) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for i in indices {
            by_class[self.labels[i]].push(i);
        }
        by_class
    }
}

/// Reads `label,f0,…,f{d-1}`. The class count is `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || &header[0] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `label`".into(),
        });
    }
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column {} should be named f{k}, found {name:?}", k + 1),
            });
        }
    }
    let d = header.len() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let label: usize = record[0].parse().map_err(|_| {
            Error::Data(format!(
                "line {line}: label {:?} is not a non-negative integer",
                &record[0]
            ))
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("feature {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: non-finite feature")));
            }
            data.push(v);
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    LabeledDataset::new(Matrix::new(n, d, data)?, labels, classes)
}

pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (i, &y) in ds.labels.iter().enumerate() {
        let mut rec = vec![y.to_string()];
        rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `FDS1`, u32 n, u32 d, u32 C, n u32 labels, n·d f32 features; all little-endian.
pub fn load_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Data("missing FDS1 header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (n, d, classes) = (word(1), word(2), word(3));
    let expected = 16 + 4 * n + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "binary dataset declares {n}x{d} but holds {} bytes (expected {expected})",
            bytes.len()
        )));
    }
    let labels: Vec<usize> = (0..n).map(|i| word(4 + i)).collect();
    let base = 16 + 4 * n;
    let data = (0..n * d)
        .map(|k| {
            let o = base + 4 * k;
            f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
        })
        .collect();
    LabeledDataset::new(Matrix::new(n, d, data)?, labels, classes)
}

/// Features are narrowed to f32.
pub fn write_binary(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    for v in [ds.len(), ds.dim(), ds.classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &y in &ds.labels {
        w.write_all(&(y as u32).to_le_bytes())?;
    }
    for &v in ds.features.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation σ.
    pub spread: f64,
    /// Minimum distance s between any two class means.
    pub separation: f64,
    pub test_fraction: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 500,
            dim: 32,
            spread: 1.0,
            separation: 4.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub dataset: LabeledDataset,
    pub means: Matrix,
}

/// Class `c` draws from `N(μ_c, σ²I)`.
///
/// When `C ≤ d` the means sit on a scaled random orthonormal frame, so every
/// pair is exactly `s` apart; otherwise they are rejection-sampled. The last
/// `round(test_fraction · per_class)` samples of each class are tagged test.
pub fn synth_gaussian_mixture(spec: &MixtureSpec, rng: &mut RngStream) -> Result<GaussianMixture> {
    let MixtureSpec {
        classes,
        per_class,
        dim,
        spread,
        separation,
        test_fraction,
    } = *spec;
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "mixture needs ≥2 classes and ≥2 dims, got C={classes}, d={dim}"
        )));
    }
    if !(spread >= 0.0 && separation > 0.0 && (0.0..1.0).contains(&test_fraction)) {
        return Err(Error::Config(format!(
            "invalid mixture spread {spread}, separation {separation} or test fraction {test_fraction}"
        )));
    }
    let means = if classes <= dim {
        orthonormal_means(classes, dim, separation / std::f64::consts::SQRT_2, rng)
    } else {
        rejection_means(classes, dim, separation, rng)
    };
    let n_test = (test_fraction * per_class as f64).round() as usize;
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut tags = Vec::with_capacity(classes * per_class);
    let noise = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("finite spread");
    for c in 0..classes {
        for k in 0..per_class {
            for &m in means.row(c) {
                let e = if spread > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(m + e);
            }
            labels.push(c);
            tags.push(if k >= per_class - n_test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    let n = labels.len();
    let dataset = LabeledDataset::new(Matrix::new(n, dim, data)?, labels, classes)?.with_split_tags(tags)?;
    Ok(GaussianMixture { dataset, means })
}

fn orthonormal_means(classes: usize, dim: usize, scale: f64, rng: &mut RngStream) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = Matrix::from_rows(&basis).expect("uniform rows");
    m.scale(scale);
    m
}

fn rejection_means(classes: usize, dim: usize, separation: f64, rng: &mut RngStream) -> Matrix {
    let mut radius = separation;
    loop {
        for _ in 0..1000 {
            let mut pts: Vec<Vec<f64>> = Vec::with_capacity(classes);
            let mut ok = true;
            for _ in 0..classes {
                let p: Vec<f64> = (0..dim).map(|_| rng.uniform(-radius, radius)).collect();
                if pts.iter().any(|q| {
                    let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() < separation
                }) {
                    ok = false;
                    break;
                }
                pts.push(p);
            }
            if ok {
                return Matrix::from_rows(&pts).expect("uniform rows");
            }
        }
        radius *= 1.25;
    }
}

/// Disjoint per-client index sets over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub indices: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    /// `q_i = n_i / Σ n_j`.
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
}

impl ClientPartition {
    pub fn clients(&self) -> usize {
        self.indices.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// SHA-256 over the index sets; equal partitions hash equally.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for set in &self.indices {
            h.update((set.len() as u64).to_le_bytes());
            for &i in set {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub min_size: usize,
    pub max_retries: usize,
}

impl PartitionSpec {
    pub fn new(clients: usize, alpha: f64) -> Self {
        Self {
            clients,
            alpha,
            min_size: 10,
            max_retries: 100,
        }
    }
}

/// Class-wise Dirichlet split: for every class draw `p ~ Dir(α·1_K)` and send
/// each of that class's training samples to a client drawn from `p`.
/// Draws that leave a client below `min_size` are redrawn whole.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    spec: &PartitionSpec,
    rng: &mut RngStream,
) -> Result<ClientPartition> {
    let PartitionSpec {
        clients: k,
        alpha,
        min_size,
        max_retries,
    } = *spec;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "Dirichlet alpha must be positive, got {alpha}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let train = ds.train_indices();
    if min_size * k > train.len() {
        return Err(Error::Partition(format!(
            "{k} clients × min size {min_size} exceeds {} training samples",
            train.len()
        )));
    }
    let by_class = ds.indices_by_class(train.into_iter());
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..max_retries.max(1) {
        let mut sets = vec![Vec::new(); k];
        for class_idx in &by_class {
            if class_idx.is_empty() {
                continue;
            }
            let cumulative = dirichlet_cdf(&gamma, k, rng);
            for &i in class_idx {
                let u = rng.uniform(0.0, 1.0);
                let client = cumulative.partition_point(|&c| c <= u).min(k - 1);
                sets[client].push(i);
            }
        }
        if sets.iter().all(|s| s.len() >= min_size) {
            for s in sets.iter_mut() {
                s.sort_unstable();
            }
            let counts: Vec<usize> = sets.iter().map(Vec::len).collect();
            let total: usize = counts.iter().sum();
            let weights = counts.iter().map(|&n| n as f64 / total as f64).collect();
            return Ok(ClientPartition {
                indices: sets,
                counts,
                weights,
                alpha,
                seed: rng.id().seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "no draw gave every one of {k} clients ≥{min_size} samples in {max_retries} attempts (α={alpha})"
    )))
}

/// Cumulative probabilities of one `Dir(α·1_K)` draw.
fn dirichlet_cdf(gamma: &Gamma<f64>, k: usize, rng: &mut RngStream) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let probs: Vec<f64> = if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: all mass on one uniformly chosen client
        let pick = (rng.uniform(0.0, k as f64) as usize).min(k - 1);
        (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
    };
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    cdf[k - 1] = 1.0;
    cdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSetPolicy {
    /// Global test samples restricted to classes the client holds in training.
    #[default]
    LocalClasses,
    /// Every global test sample.
    Full,
    /// Each class's global test samples split across clients in the same
    /// proportions as that class's training samples; client test sets are
    /// disjoint and follow their training label distribution.
    Proportional,
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn client_view(
    ds: &LabeledDataset,
    part: &ClientPartition,
    i: usize,
    policy: TestSetPolicy,
) -> Result<ClientData> {
    if i >= part.clients() {
        return Err(Error::Data(format!(
            "client {i} out of range for {} clients",
            part.clients()
        )));
    }
    let train = ds.subset(&part.indices[i]);
    let test_idx: Vec<usize> = match policy {
        TestSetPolicy::Full => ds.test_indices(),
        TestSetPolicy::LocalClasses => {
            let held = train.present_classes();
            ds.test_indices()
                .into_iter()
                .filter(|&t| held.contains(&ds.labels[t]))
                .collect()
        }
        TestSetPolicy::Proportional => proportional_test(ds, part, i),
    };
    Ok(ClientData {
        id: i,
        train,
        test: ds.subset(&test_idx),
    })
}

/// Client `i`'s slice of every class's test samples: the contiguous range
/// `[⌊F_{i-1}·m⌋, ⌊F_i·m⌋)` where `F` is the cumulative training share of
/// that class over clients and `m` its test count.
fn proportional_test(ds: &LabeledDataset, part: &ClientPartition, i: usize) -> Vec<usize> {
    let mut per_client = vec![vec![0usize; ds.classes]; part.clients()];
    for (k, set) in part.indices.iter().enumerate() {
        for &j in set {
            per_client[k][ds.labels[j]] += 1;
        }
    }
    let mut out = Vec::new();
    for (c, test) in ds
        .indices_by_class(ds.test_indices().into_iter())
        .into_iter()
        .enumerate()
    {
        let total: usize = per_client.iter().map(|n| n[c]).sum();
        if total == 0 {
            continue;
        }
        let before: usize = per_client[..i].iter().map(|n| n[c]).sum();
        let m = test.len();
        let lo = before * m / total;
        let hi = (before + per_client[i][c]) * m / total;
        out.extend_from_slice(&test[lo..hi]);
    }
    out.sort_unstable();
    out
}

pub fn client_views(
    ds: &LabeledDataset,
    part: &ClientPartition,
    policy: TestSetPolicy,
) -> Result<Vec<ClientData>> {
    (0..part.clients())
        .map(|i| client_view(ds, part, i, policy))
        .collect()
}
