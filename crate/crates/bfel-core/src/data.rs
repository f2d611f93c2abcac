//! In-memory datasets, seeded sampling, sharding, and synthetic data.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, CoreResult};
use crate::rng::derive_rng;

/// Labeled samples with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    feature_dim: usize,
    num_classes: u32,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, feature_dim: usize, num_classes: u32) -> CoreResult<Self> {
        if labels.is_empty() {
            return Err(CoreError::EmptyInput("dataset"));
        }
        if feature_dim == 0 || num_classes == 0 {
            return Err(CoreError::InvalidConfig("feature dim and class count must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(CoreError::DimensionMismatch {
                expected: labels.len() * feature_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("dataset features"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { features, labels, feature_dim, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Whole dataset as a batch.
    pub fn all(&self) -> Batch<'_> {
        Batch { data: self, indices: None }
    }

    /// Batch over the given sample indices.
    pub fn batch<'a>(&'a self, indices: &'a [u32]) -> Batch<'a> {
        Batch { data: self, indices: Some(indices) }
    }

    /// Owned dataset holding the selected samples, in order.
    pub fn subset(&self, indices: &[u32]) -> CoreResult<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i as usize));
            labels.push(self.labels[i as usize]);
        }
        Self::new(features, labels, self.feature_dim, self.num_classes)
    }

    /// Seeded split into `(front, back)` of `fraction` / `1 - fraction`.
    pub fn split_fraction(&self, fraction: f64, seed: u64) -> CoreResult<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(CoreError::InvalidConfig("split fraction must be in (0, 1)".into()));
        }
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        order.shuffle(&mut derive_rng(seed, "split", &[]));
        let cut = ((self.len() as f64) * fraction) as usize;
        let cut = cut.clamp(1, self.len() - 1);
        Ok((self.subset(&order[..cut])?, self.subset(&order[cut..])?))
    }

    /// IID shards: a seeded permutation dealt round-robin to `n` owners.
    pub fn split_shards(&self, n: usize, seed: u64) -> CoreResult<Vec<Self>> {
        if n == 0 || n > self.len() {
            return Err(CoreError::InvalidConfig("shard count must be in 1..=len".into()));
        }
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        order.shuffle(&mut derive_rng(seed, "shards", &[]));
        let mut buckets: Vec<Vec<u32>> = (0..n).map(|_| Vec::new()).collect();
        for (i, idx) in order.into_iter().enumerate() {
            buckets[i % n].push(idx);
        }
        buckets.into_iter().map(|b| self.subset(&b)).collect()
    }

    /// Cyclically permutes labels (`l → l+1 mod classes`); the dataset-level
    /// form of a label-flipping worker.
    pub fn flip_labels(&self) -> Self {
        let labels = self.labels.iter().map(|&l| (l + 1) % self.num_classes).collect();
        Self { features: self.features.clone(), labels, feature_dim: self.feature_dim, num_classes: self.num_classes }
    }
}

/// Borrowed view of a dataset, optionally restricted to an index list.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    data: &'a Dataset,
    indices: Option<&'a [u32]>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.map_or(self.data.len(), <[u32]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.data.feature_dim()
    }

    pub fn num_classes(&self) -> u32 {
        self.data.num_classes()
    }

    /// Iterates `(features, label)` pairs in batch order.
    pub fn samples(&self) -> impl Iterator<Item = (&'a [f64], u32)> + '_ {
        let data = self.data;
        (0..self.len()).map(move |i| {
            let idx = self.indices.map_or(i, |ind| ind[i] as usize);
            (data.feature_row(idx), data.labels()[idx])
        })
    }
}

/// Without-replacement mini-batch scheduler: a fresh seeded shuffle per pass,
/// identical across reruns.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
    pass: u64,
}

impl BatchSampler {
    /// `stream` distinguishes samplers sharing one run seed (worker id).
    pub fn new(len: usize, batch_size: usize, seed: u64, stream: u64) -> CoreResult<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(CoreError::InvalidConfig("batch size must be in 1..=len".into()));
        }
        let mut sampler = Self {
            order: (0..len as u32).collect(),
            cursor: 0,
            batch_size,
            seed,
            stream,
            pass: 0,
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        let mut rng = derive_rng(self.seed, "batch-shuffle", &[self.stream, self.pass]);
        self.order.shuffle(&mut rng);
        self.pass += 1;
        self.cursor = 0;
    }

    /// Next batch of indices; reshuffles when the pass is exhausted, so the
    /// final batch of a pass may be short.
    pub fn next_batch(&mut self) -> &[u32] {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = &self.order[self.cursor..end];
        self.cursor = end;
        batch
    }
}

/// Synthetic Gaussian-blobs task description.
///
/// Class means are nonzero only on `informative` seeded coordinates, so
/// gradient magnitude concentrates on a small coordinate subset — the regime
/// where magnitude-based sparsification keeps accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobsSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: u32,
    pub informative: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
}

impl BlobsSpec {
    pub fn validate(&self) -> CoreResult<()> {
        if self.samples == 0 || self.features == 0 || self.classes == 0 {
            return Err(CoreError::InvalidConfig("blobs: counts must be positive".into()));
        }
        if self.informative == 0 || self.informative > self.features {
            return Err(CoreError::InvalidConfig("blobs: informative must be in 1..=features".into()));
        }
        if !self.noise_sigma.is_finite()
            || self.noise_sigma < 0.0
            || !self.center_scale.is_finite()
            || self.center_scale <= 0.0
        {
            return Err(CoreError::InvalidConfig("blobs: bad scale parameters".into()));
        }
        Ok(())
    }
}

/// Generates a balanced blobs dataset, deterministically from `seed`.
pub fn generate_blobs(spec: &BlobsSpec, seed: u64) -> CoreResult<Dataset> {
    spec.validate()?;
    let mut rng = derive_rng(seed, "blobs", &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Informative coordinate subset, shared by all classes.
    let mut coords: Vec<u32> = (0..spec.features as u32).collect();
    coords.shuffle(&mut rng);
    coords.truncate(spec.informative);

    let mut means = alloc::vec![0.0; spec.classes as usize * spec.features];
    for c in 0..spec.classes as usize {
        for &d in &coords {
            means[c * spec.features + d as usize] = spec.center_scale * normal.sample(&mut rng);
        }
    }

    let mut features = Vec::with_capacity(spec.samples * spec.features);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = (i as u32) % spec.classes;
        let mean = &means[label as usize * spec.features..(label as usize + 1) * spec.features];
        for m in mean {
            features.push(m + spec.noise_sigma * normal.sample(&mut rng));
        }
        labels.push(label);
    }

    // Shuffle sample order so shards and splits see mixed classes.
    let data = Dataset::new(features, labels, spec.features, spec.classes)?;
    let mut order: Vec<u32> = (0..spec.samples as u32).collect();
    order.shuffle(&mut rng);
    data.subset(&order)
}
