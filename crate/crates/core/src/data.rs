//! Labeled datasets: MNIST IDX files, synthetic Gaussian blobs, and the
//! seeded train/validation split with per-epoch batch order.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `N x D`, values in `[0, 1]`.
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::shape(
                "LabeledDataset",
                format!("{} labels for {} samples", labels.len(), samples.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Copies the selected rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.samples.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (samples, labels) = self.gather(indices);
        LabeledDataset {
            samples,
            labels,
            class_count: self.class_count,
        }
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

/// Parses an IDX image file. Returns `(n, rows * cols, pixels)`.
fn parse_images(buf: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, 0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(buf, 4, path)? as usize;
    let rows = be_u32(buf, 8, path)? as usize;
    let cols = be_u32(buf, 12, path)? as usize;
    let dim = rows * cols;
    let body = &buf[16..];
    if body.len() != n * dim {
        let offset = 16 + body.len().min(n * dim);
        return Err(format_err(
            path,
            offset,
            format!("expected {} pixel bytes for {n} images of {rows}x{cols}, found {}", n * dim, body.len()),
        ));
    }
    Ok((n, dim, body.to_vec()))
}

fn parse_labels(buf: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, 0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(buf, 4, path)? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(format_err(
            path,
            8 + body.len().min(n),
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by `1 / 255`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (n, dim, pixels) = parse_images(&read_file(images)?, images)?;
    let raw_labels = parse_labels(&read_file(labels)?, labels)?;
    if raw_labels.len() != n {
        return Err(format_err(
            labels,
            4,
            format!("{} labels but {n} images in {}", raw_labels.len(), images.display()),
        ));
    }
    if let Some(pos) = raw_labels.iter().position(|&l| l > 9) {
        return Err(format_err(labels, 8 + pos, format!("label {} outside 0..10", raw_labels[pos])));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let samples = Matrix::from_vec(n, dim, data)?;
    LabeledDataset::new(samples, raw_labels.into_iter().map(usize::from).collect(), 10)
}

/// Conventional file names inside an MNIST directory.
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok((
            load_mnist_idx(&self.train_images, &self.train_labels)?,
            load_mnist_idx(&self.test_images, &self.test_labels)?,
        ))
    }
}

/// Writes an IDX pair; pixels are `round(255 * v)`. Used for fixtures.
pub fn write_mnist_idx(ds: &LabeledDataset, side: (usize, usize), images: &Path, labels: &Path) -> Result<()> {
    if side.0 * side.1 != ds.dim() {
        return Err(Error::shape("write_mnist_idx", format!("{side:?} does not cover width {}", ds.dim())));
    }
    let mut img = Vec::with_capacity(16 + ds.samples.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, side.0 as u32, side.1 as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.samples.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit a byte")))?);
    }
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

/// Parameters of a synthetic blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
}

/// Center of class `c`: 0.8 on dimensions `d` with `d % classes == c`, 0.2 elsewhere.
pub fn blob_center(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    (0..dim).map(|d| if d % classes == c { 0.8 } else { 0.2 }).collect()
}

/// Gaussian blobs around [`blob_center`], clipped to `[0, 1]`, grouped by class.
pub fn synth_blobs(spec: &BlobSpec, rng: &mut RngStream) -> Result<LabeledDataset> {
    let BlobSpec {
        per_class,
        classes,
        dim,
        spread,
    } = *spec;
    if classes < 2 {
        return Err(Error::config("dataset.classes", "need at least two classes"));
    }
    if dim < classes {
        return Err(Error::config("dataset.dim", format!("{dim} < {classes} classes leaves classes without a distinct center")));
    }
    let noise = Normal::new(0.0, spread)
        .map_err(|e| Error::config("dataset.spread", e.to_string()))?;
    let mut data = Vec::with_capacity(per_class * classes * dim);
    let mut labels = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        let center = blob_center(c, classes, dim);
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| (m + noise.sample(rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(per_class * classes, dim, data)?, labels, classes)
}

/// Seeded train/validation split and per-epoch shuffled batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    /// Splits `0..n` once: `round(train_frac * n)` training indices, the rest validation.
    pub fn new(n: usize, train_frac: f64, batch_size: usize, rng: &RngStream) -> Result<Self> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::config("train_frac", format!("{train_frac} outside (0, 1)")));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.child("split").shuffle(&mut order);
        let n_train = (train_frac * n as f64).round() as usize;
        let validation = order.split_off(n_train);
        Ok(Self {
            train: order,
            validation,
            batch_size,
            seed: rng.seed(),
        })
    }

    /// Training indices for 1-based `epoch`, shuffled, chunked; the last batch may be short.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order = self.train.clone();
        RngStream::new(self.seed)
            .child(&format!("epoch/{epoch}"))
            .shuffle(&mut order);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}
