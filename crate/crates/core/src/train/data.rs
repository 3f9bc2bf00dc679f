//! MNIST (IDX) and CIFAR-10 (binary batch) readers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PER_BATCH: usize = 10_000;

/// Per-channel CIFAR-10 training-set mean and standard deviation of pixel
/// values scaled to [0, 1].
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images stored row-major as `[len, sample_shape...]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, sample_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            sample_shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a `[batch, sample_shape...]` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("sample {i} of {}", self.len())));
        }
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::c(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// First `n` samples (all when `n ≥ len`).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::Format(format!(
            "IDX image payload is {} bytes, header implies {want}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload is {} bytes, header implies {n}",
            body.len()
        )));
    }
    Ok(body)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (n, rows, cols, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(images, labels.to_vec(), vec![rows * cols], 10)
}

/// Reads the four uncompressed MNIST IDX files from `dir`. Images are
/// flattened to 784 features scaled to [0, 1].
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<DatasetHandle> {
    let dir = dir.as_ref();
    Ok(DatasetHandle {
        train: mnist_split(dir, "train")?,
        test: mnist_split(dir, "t10k")?,
    })
}

/// Parses CIFAR-10 binary records (label byte + 3072 channel-major pixels),
/// normalizing each channel with [`CIFAR_MEAN`] / [`CIFAR_STD`].
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch of {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR label {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Dataset::new(images, labels, vec![3, 32, 32], 10)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut first = it.next().ok_or_else(|| Error::Format("no CIFAR batches".into()))?;
    for d in it {
        first.images.extend(d.images);
        first.labels.extend(d.labels);
    }
    Ok(first)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`, keeping at
/// most `train_limit` training and `test_limit` test images.
pub fn load_cifar10(dir: impl AsRef<Path>, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<DatasetHandle> {
    let dir = dir.as_ref();
    let mut parts = Vec::new();
    let mut have = 0;
    for b in 1..=5 {
        if train_limit.is_some_and(|l| have >= l) {
            break;
        }
        let d = parse_cifar_records(&read(&dir.join(format!("data_batch_{b}.bin")))?)?;
        have += d.len();
        parts.push(d);
    }
    let mut train = concat(parts)?;
    let mut test = parse_cifar_records(&read(&dir.join("test_batch.bin"))?)?;
    if let Some(l) = train_limit {
        train = train.truncated(l);
    }
    if let Some(l) = test_limit {
        test = test.truncated(l);
    }
    Ok(DatasetHandle { train, test })
}
