//! Datasets, on-disk formats, synthetic generators, batching, and sharding.

mod formats;
mod synth;

pub use formats::{load_cifar_binary, load_idx, write_cifar_binary, write_idx, CIFAR_MEAN, CIFAR_RECORD, CIFAR_STD};
pub use synth::{synth_blobs, synth_glyphs};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset config error: {0}")]
    Config(String),
    #[error("{file}: bad magic 0x{found:08x} at offset {offset}, expected 0x{expected:08x}")]
    BadMagic { file: PathBuf, offset: usize, expected: u32, found: u32 },
    #[error("{file}: truncated at offset {offset}: need {needed} bytes, {available} available")]
    Truncated { file: PathBuf, offset: usize, needed: usize, available: usize },
    #[error("{file}: {extra} unexpected trailing bytes at offset {offset}")]
    Trailing { file: PathBuf, offset: usize, extra: usize },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: size {len} is not a multiple of the {record}-byte record")]
    RecordSize { file: PathBuf, len: usize, record: usize },
    #[error("{file}: label {label} at offset {offset} is not below {classes}")]
    Label { file: PathBuf, offset: usize, label: usize, classes: usize },
    #[error("i/o error on {file}: {source}")]
    Io { file: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-channel affine normalization applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Immutable labelled samples; features are `[N, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<u16>,
    classes: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u16>, classes: usize) -> Result<Self, DataError> {
        let n = features.dims()[0];
        if features.dims().len() < 2 {
            return Err(DataError::Config(format!("features {:?} lack a sample axis", features.dims())));
        }
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if classes < 2 {
            return Err(DataError::Config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(DataError::Config(format!("label {bad} is not below {classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = Some(n);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Per-sample dims (without the leading N).
    pub fn sample_dims(&self) -> &[usize] {
        &self.features.dims()[1..]
    }

    /// Samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u16>), DataError> {
        let x = self.features.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let (x, y) = self.gather(indices)?;
        Ok(Dataset {
            features: x,
            labels: y,
            classes: self.classes,
            normalization: self.normalization.clone(),
        })
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Seeded shuffling into fixed-size batches. The last batch keeps the
/// remainder unless `drop_last` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batcher {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Batcher {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Config("batch size must be positive".into()));
        }
        Ok(Batcher {
            batch_size,
            seed,
            drop_last: false,
        })
    }

    /// Index batches for `epoch` over `n` samples. The permutation depends
    /// only on (seed, epoch, n).
    pub fn epoch_batches(&self, n: usize, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        let mut out: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.drop_last && out.last().is_some_and(|b| b.len() < self.batch_size) {
            out.pop();
        }
        out
    }
}

/// Splits into `clients` disjoint IID shards after a seeded shuffle. Sizes
/// differ by at most one; earlier shards take the remainder.
pub fn shards(dataset: &Dataset, clients: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
    if clients == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    if clients > dataset.len() {
        return Err(DataError::Config(format!(
            "{clients} clients for {} samples",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = dataset.len() / clients;
    let extra = dataset.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let len = base + usize::from(k < extra);
        out.push(dataset.subset(&order[start..start + len])?);
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn indexed(n: usize) -> Dataset {
        let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| (i % 3) as u16).collect();
        Dataset::new(Tensor::from_values(&[n, 1], &v, DType::F64).unwrap(), labels, 3).unwrap()
    }

    #[test]
    fn batcher_keeps_remainder_and_is_seeded() {
        let b = Batcher::new(32, 9).unwrap();
        let e0 = b.epoch_batches(100, 0);
        assert_eq!(e0.len(), 4);
        assert_eq!(e0.last().unwrap().len(), 4);
        assert_eq!(e0, b.epoch_batches(100, 0));
        assert_ne!(e0, b.epoch_batches(100, 1));
        let mut drop = b;
        drop.drop_last = true;
        let d0 = drop.epoch_batches(100, 0);
        assert_eq!(d0.len(), 3);
        assert!(d0.iter().all(|x| x.len() == 32));
    }

    #[test]
    fn shard_sizes() {
        let d = indexed(1000);
        let s = shards(&d, 10, 1).unwrap();
        assert!(s.iter().all(|x| x.len() == 100));
        let s = shards(&indexed(7), 3, 1).unwrap();
        assert_eq!(s.iter().map(Dataset::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(shards(&indexed(2), 3, 1).is_err());
        assert!(shards(&indexed(2), 0, 1).is_err());
    }

    #[test]
    fn single_shard_is_a_permutation() {
        let d = indexed(50);
        let s = shards(&d, 1, 4).unwrap();
        let mut got: Vec<f64> = s[0].features().to_f64_vec();
        assert_ne!(got, d.features().to_f64_vec());
        got.sort_by(f64::total_cmp);
        assert_eq!(got, d.features().to_f64_vec());
    }

    #[test]
    fn dataset_validation() {
        let x = Tensor::zeros(&[2, 3], DType::F32).unwrap();
        assert!(Dataset::new(x.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(x.clone(), vec![0, 5], 2).is_err());
        assert!(Dataset::new(x, vec![0, 1], 1).is_err());
    }
}
