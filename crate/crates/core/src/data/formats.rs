//! IDX (big-endian headers, one byte per pixel) and CIFAR-10 binary records.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Normalization};
use crate::tensor::{DType, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        file: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        file: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    file: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DataError::Truncated {
                file: self.file.to_path_buf(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(DataError::BadMagic {
                file: self.file.to_path_buf(),
                offset: 0,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.pos != self.bytes.len() {
            return Err(DataError::Trailing {
                file: self.file.to_path_buf(),
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 into `[0, 1]`
/// and laid out `[N, 1, H, W]`. The class count is inferred from the labels
/// (at least 10, the usual digit count).
pub fn load_idx(images: &Path, labels: &Path, dtype: DType) -> Result<Dataset, DataError> {
    let img_bytes = read(images)?;
    let mut c = Cursor {
        file: images,
        bytes: &img_bytes,
        pos: 0,
    };
    c.magic(IDX_IMAGES)?;
    let n = c.u32_be()? as usize;
    let h = c.u32_be()? as usize;
    let w = c.u32_be()? as usize;
    let pixels = c.take(n.saturating_mul(h).saturating_mul(w))?;
    c.finish()?;

    let lab_bytes = read(labels)?;
    let mut l = Cursor {
        file: labels,
        bytes: &lab_bytes,
        pos: 0,
    };
    l.magic(IDX_LABELS)?;
    let m = l.u32_be()? as usize;
    if m != n {
        return Err(DataError::CountMismatch { images: n, labels: m });
    }
    let raw = l.take(m)?;
    l.finish()?;

    if n == 0 || h == 0 || w == 0 {
        return Err(DataError::Config(format!("{}: empty image set {n}x{h}x{w}", images.display())));
    }
    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Tensor::from_values(&[n, 1, h, w], &values, dtype)?;
    let labels: Vec<u16> = raw.iter().map(|&b| b as u16).collect();
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    Dataset::new(features, labels, classes)
}

/// Writes `[N, 1, H, W]` features in `[0, 1]` as IDX, rounding to bytes.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let dims = dataset.features().dims();
    let [n, 1, h, w] = *dims else {
        return Err(DataError::Config(format!("IDX needs [N, 1, H, W] features, got {dims:?}")));
    };
    if dataset.classes() > 256 {
        return Err(DataError::Config("IDX labels are single bytes".into()));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(dataset.features().to_f64_vec().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    write(images, &out)?;
    let mut out = Vec::with_capacity(8 + n);
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend(dataset.labels().iter().map(|&l| l as u8));
    write(labels, &out)
}

/// Loads CIFAR-10 binary batches: each record is a label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes. Channels are normalized with the
/// standard CIFAR-10 mean and std.
pub fn load_cifar_binary(paths: &[PathBuf], dtype: DType) -> Result<Dataset, DataError> {
    if paths.is_empty() {
        return Err(DataError::Config("no CIFAR files given".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordSize {
                file: path.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(DataError::Label {
                    file: path.clone(),
                    offset: r * CIFAR_RECORD,
                    label,
                    classes: 10,
                });
            }
            labels.push(label as u16);
            for (i, &p) in record[1..].iter().enumerate() {
                let c = i / 1024;
                values.push((p as f64 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    let features = Tensor::from_values(&[labels.len(), 3, 32, 32], &values, dtype)?;
    Ok(Dataset::new(features, labels, 10)?.with_normalization(Normalization {
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    }))
}

/// Inverse of [`load_cifar_binary`] for one file.
pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if dataset.sample_dims() != [3, 32, 32] || dataset.classes() > 10 {
        return Err(DataError::Config("CIFAR-10 records need [N, 3, 32, 32] and at most 10 classes".into()));
    }
    let values = dataset.features().to_f64_vec();
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (label, sample) in dataset.labels().iter().zip(values.chunks_exact(3072)) {
        out.push(*label as u8);
        for (i, v) in sample.iter().enumerate() {
            let c = i / 1024;
            out.push(((v * CIFAR_STD[c] + CIFAR_MEAN[c]) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(dir: &Path, n: u32, label_count: u32) -> (PathBuf, PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lab"));
        let mut img = Vec::new();
        for v in [IDX_IMAGES, n, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n * 4).map(|i| if i == 0 { 255 } else { (i % 7) as u8 }));
        fs::write(&ip, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
        lab.extend_from_slice(&label_count.to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_header_sets_dims_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, 3);
        let d = load_idx(&ip, &lp, DType::F32).unwrap();
        assert_eq!(d.features().dims(), &[3, 1, 2, 2]);
        assert_eq!(d.features().to_f64_vec()[0], 1.0);
        assert_eq!(d.labels(), &[0, 1, 2]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, 4);
        match load_idx(&ip, &lp, DType::F32) {
            Err(DataError::CountMismatch { images: 3, labels: 4 }) => {}
            other => panic!("{other:?}"),
        }
        let (ip, lp) = idx_pair(dir.path(), 3, 3);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x01;
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp, DType::F32), Err(DataError::BadMagic { offset: 0, .. })));
        bytes[3] = 0x03;
        bytes.truncate(20);
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, DType::F32),
            Err(DataError::Truncated { offset: 16, needed: 12, available: 4, .. })
        ));
    }

    #[test]
    fn cifar_record_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD * 5];
        bytes[0] = 9;
        fs::write(&p, &bytes).unwrap();
        let d = load_cifar_binary(&[p.clone()], DType::F64).unwrap();
        assert_eq!(d.features().dims(), &[5, 3, 32, 32]);
        assert_eq!(d.labels()[0], 9);
        let v = d.features().to_f64_vec();
        for c in 0..3 {
            assert_eq!(v[c * 1024], -CIFAR_MEAN[c] / CIFAR_STD[c]);
        }
        assert_eq!(d.normalization().unwrap().std, CIFAR_STD.to_vec());
        fs::write(&p, &bytes[..CIFAR_RECORD + 1]).unwrap();
        assert!(matches!(load_cifar_binary(&[p], DType::F64), Err(DataError::RecordSize { .. })));
    }
}
