//! In-memory labelled image datasets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::Shape3;
use crate::{Error, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `N×C×H×W` with values in `[0, 1]` and class labels below `class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension { op: "dataset images", left: images.shape().to_vec(), right: vec![4] });
        }
        if images.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset labels",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!("label {bad} not below class count {class_count}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_shape(&self) -> Shape3 {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `indices` into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.images.cols();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        (Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"), labels)
    }

    /// Contiguous range `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::EmptySplit(format!("range {start}..{end} of {}", self.len())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Ok(Self { images, labels, class_count: self.class_count, split })
    }
}

/// Keeps the samples whose label is below `k`, preserving their order.
pub fn filter_classes(ds: &Dataset, k: usize) -> Result<Dataset> {
    if k < 2 || k > ds.class_count {
        return Err(Error::Domain(format!("class count {k} outside 2..={}", ds.class_count)));
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] < k).collect();
    if idx.is_empty() {
        return Err(Error::EmptySplit(format!("no samples with label below {k}")));
    }
    let (images, labels) = ds.batch(&idx);
    Ok(Dataset { images, labels, class_count: k, split: ds.split })
}

/// Parameters of [`synth_blobs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    /// Minimum distance between cluster centres, in units of the cluster
    /// standard deviation.
    pub separation: f64,
    pub seed: u64,
}

/// Isotropic unit-variance Gaussian clusters around seeded random centres.
///
/// Centres lie on a sphere of radius `separation · classes` and are redrawn
/// until every pair is at least `separation` apart. Samples are emitted in a
/// seeded random order, then the whole set is mapped affinely (one scale, one
/// offset for all coordinates) into `[0, 1]`, which preserves the geometry.
/// Samples are laid out as `1×1×dim` images.
pub fn synth_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    let BlobSpec { n_per_class, classes, dim, separation, seed } = *spec;
    if n_per_class == 0 || dim == 0 {
        return Err(Error::EmptySplit("synth_blobs with no samples".into()));
    }
    if classes < 2 {
        return Err(Error::Domain("synth_blobs needs at least two classes".into()));
    }
    let mut rng = SeededRng::new(seed);
    let radius = separation * classes as f64;
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centres.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Domain("could not place separated blob centres".into()));
        }
        let mut c: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = libm::sqrt(c.iter().map(|v| v * v).sum());
        if norm == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|v| *v *= radius / norm);
        let far =
            centres.iter().all(|o| libm::sqrt(o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum()) >= separation);
        if far {
            centres.push(c);
        }
    }
    let n = n_per_class * classes;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut data = vec![0.0; n * dim];
    let mut labels = vec![0; n];
    for (slot, &id) in order.iter().enumerate() {
        let class = id % classes;
        labels[slot] = class;
        for (j, c) in centres[class].iter().enumerate() {
            data[slot * dim + j] = c + rng.normal();
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    data.iter_mut().for_each(|v| *v = ((*v - lo) * scale).clamp(0.0, 1.0));
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, classes, split)
}
