//! Datasets, IDX loading, synthetic class blobs and the label-skewed,
//! size-skewed client partition.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standardization constants for MNIST-format pixels scaled to [0, 1].
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if inputs.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidDataset("inputs contain NaN".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.inputs.row(i), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order. May be empty.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::new(indices.len(), d, data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let sub = self.select(indices);
        Batch::new(sub.inputs, sub.labels)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }
}

/// Maps a raw pixel byte to `(x/255 − mean)/std`.
pub fn standardize_pixel(byte: u8) -> f64 {
    (byte as f64 / 255.0 - MNIST_MEAN) / MNIST_STD
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: n,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::MagicMismatch {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an IDX image file; returns `(count, rows·cols, standardized pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = IdxReader { path, bytes, offset: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dim = rows * cols;
    let pixels = r.take(count * dim)?;
    Ok((count, dim, pixels.iter().map(|&p| standardize_pixel(p)).collect()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader { path, bytes, offset: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair (MNIST layout). Images are flattened
/// and standardized with the MNIST mean and std; the class count is
/// `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (count, dim, pixels) = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images_path: images_path.to_path_buf(),
            images: count,
            labels_path: labels_path.to_path_buf(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::new(count, dim, pixels)?, labels, num_classes)
}

/// Gaussian class blobs grouped into clusters.
///
/// Each cluster gets a random center; each of its classes gets a mean offset
/// from that center, so classes of one cluster sit near each other and
/// clients holding classes from the same cluster see similar inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_clusters: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Per-coordinate standard deviation of every blob.
    #[serde(default = "default_class_std")]
    pub class_std: f64,
    /// Typical distance between two class means of one cluster.
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    /// Typical distance between two cluster centers.
    #[serde(default = "default_cluster_separation")]
    pub cluster_separation: f64,
}

fn default_class_std() -> f64 {
    0.5
}

fn default_class_separation() -> f64 {
    3.0
}

fn default_cluster_separation() -> f64 {
    6.0
}

impl SyntheticConfig {
    pub fn new(num_clusters: usize, samples_per_class: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            num_clusters,
            samples_per_class,
            dim,
            num_classes,
            class_std: default_class_std(),
            class_separation: default_class_separation(),
            cluster_separation: default_cluster_separation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidDataset("synthetic sizes must all be positive".into()));
        }
        if !self.num_classes.is_multiple_of(self.num_clusters) {
            return Err(Error::InvalidDataset(format!(
                "{} classes do not divide into {} clusters",
                self.num_classes, self.num_clusters
            )));
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return Err(Error::InvalidDataset("class_std must be positive".into()));
        }
        if !(self.class_separation >= 0.0 && self.cluster_separation >= 0.0) {
            return Err(Error::InvalidDataset("separations must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cluster_of(&self, class: usize) -> usize {
        class / (self.num_classes / self.num_clusters)
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Samples are ordered class by class.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Two independent unit directions are about √2 apart, hence the scaling.
    let cluster_radius = cfg.cluster_separation / std::f64::consts::SQRT_2;
    let class_radius = cfg.class_separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| {
            random_direction(&mut rng, cfg.dim)
                .into_iter()
                .map(|x| x * cluster_radius)
                .collect()
        })
        .collect();
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| {
            let center = &centers[cfg.cluster_of(c)];
            random_direction(&mut rng, cfg.dim)
                .into_iter()
                .zip(center)
                .map(|(u, m)| m + u * class_radius)
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, cfg.class_std).expect("positive std");
    let total = cfg.num_classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(total * cfg.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            data.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::new(total, cfg.dim, data)?, labels, cfg.num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub labels_per_client: usize,
    pub lognormal_sigma: f64,
    pub seed: u64,
    /// Fraction of each client's samples kept for training.
    pub train_ratio: f64,
    /// Multiply size draws by a Uniform[0.5, 1.5) factor. Off only in tests
    /// that probe the pure lognormal limit.
    pub random_factor: bool,
}

impl PartitionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::InvalidPartition(format!(
                "need at least 2 clients, got {}",
                self.num_clients
            )));
        }
        if self.labels_per_client == 0 || self.labels_per_client > num_classes {
            return Err(Error::InvalidPartition(format!(
                "labels_per_client must be in 1..={num_classes}, got {}",
                self.labels_per_client
            )));
        }
        if self.num_clients * self.labels_per_client < num_classes {
            return Err(Error::InvalidPartition(format!(
                "{} clients × {} labels cannot cover {num_classes} classes",
                self.num_clients, self.labels_per_client
            )));
        }
        if !(self.lognormal_sigma > 0.0 && self.lognormal_sigma.is_finite()) {
            return Err(Error::InvalidPartition("lognormal_sigma must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::InvalidPartition("train_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Sorted classes assigned to this client.
    pub label_set: Vec<usize>,
    /// Source-dataset rows behind `train` and `test`.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Split `remaining` proportionally to `weights` with largest-remainder
/// rounding; ties go to the earlier entry.
fn apportion(remaining: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| remaining as f64 * w / total).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(remaining.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed and size-skewed split across clients.
///
/// Classes are dealt round-robin from a shuffled class list, `labels_per_client`
/// per client. Every (client, class) holding draws a size weight from
/// Lognormal(0, σ²), times a Uniform[0.5, 1.5) factor, and each class's
/// samples are dealt out among its holders in proportion to those weights
/// (every holder gets at least one). Each shard is then split into train and
/// test per class.
pub fn partition_heterogeneous(ds: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    let classes = ds.num_classes();
    cfg.validate(classes)?;
    let n = cfg.num_clients;
    let s = cfg.labels_per_client;
    if ds.len() < n * s {
        return Err(Error::InvalidPartition(format!(
            "{} samples cannot serve {n} clients × {s} labels",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    let label_sets: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut set: Vec<usize> = (0..s).map(|j| class_order[(i * s + j) % classes]).collect();
            set.sort_unstable();
            set
        })
        .collect();

    let lognormal = LogNormal::new(0.0, cfg.lognormal_sigma).map_err(|e| Error::InvalidPartition(e.to_string()))?;
    let factor = Uniform::new(0.5, 1.5).expect("valid range");
    // holders[c] = (client, weight) in client order
    let mut holders: Vec<Vec<(usize, f64)>> = vec![Vec::new(); classes];
    for (client, set) in label_sets.iter().enumerate() {
        for &c in set {
            let mut w = lognormal.sample(&mut rng);
            if cfg.random_factor {
                w *= factor.sample(&mut rng);
            }
            holders[c].push((client, w));
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    // assigned[client] = per-class row lists, in label_set order
    let mut assigned: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
    for c in 0..classes {
        let hs = &holders[c];
        let pool = &mut by_class[c];
        if hs.is_empty() {
            continue;
        }
        if pool.len() < hs.len() {
            return Err(Error::InsufficientClassSamples {
                class: c,
                samples: pool.len(),
                holders: hs.len(),
            });
        }
        pool.shuffle(&mut rng);
        let weights: Vec<f64> = hs.iter().map(|&(_, w)| w).collect();
        let extra = apportion(pool.len() - hs.len(), &weights);
        let mut start = 0;
        for (&(client, _), e) in hs.iter().zip(extra) {
            let take = 1 + e;
            assigned[client].push(pool[start..start + take].to_vec());
            start += take;
        }
        debug_assert_eq!(start, pool.len());
    }

    let shards = label_sets
        .into_iter()
        .zip(assigned)
        .enumerate()
        .map(|(client_id, (label_set, per_class))| {
            let mut train_indices = Vec::new();
            let mut test_indices = Vec::new();
            for rows in per_class {
                let k = rows.len();
                let k_test = if k >= 2 {
                    ((k as f64 * (1.0 - cfg.train_ratio)).round() as usize).clamp(1, k - 1)
                } else {
                    0
                };
                train_indices.extend_from_slice(&rows[..k - k_test]);
                test_indices.extend_from_slice(&rows[k - k_test..]);
            }
            ClientShard {
                client_id,
                train: ds.select(&train_indices),
                test: ds.select(&test_indices),
                label_set,
                train_indices,
                test_indices,
            }
        })
        .collect();
    Ok(shards)
}
