//! Labelled image datasets: IDX ingestion, subsampling, Gaussian corruption
//! and mini-batching.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard MNIST file names.
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Training images used for fitting; the remaining 5,000 of the 60,000 are
/// the validation split. At batch 100 this gives 550 steps per epoch.
pub const MNIST_TRAIN_SPLIT: usize = 55_000;

/// Where a dataset came from and what was done to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub sigma_test: f64,
    pub subset_ratio: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, ...]`; MNIST images are `[N, 1, 28, 28]` scaled to [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, source: &str) -> Result<Self, DataError> {
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            provenance: Provenance {
                source: source.to_string(),
                sigma_test: 0.0,
                subset_ratio: 1.0,
                seed: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            images: self.images.gather_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Self, DataError> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// Count of each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(path: &Path, bytes: Vec<u8>, magic: u32) -> Result<IdxFile, DataError> {
    let truncated = |expected, found| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        found,
    };
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(truncated(header, bytes.len()));
    }
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let found = be(0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(truncated(header, bytes.len()));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be(4 + 4 * i) as usize).collect();
    let expected: usize = dims.iter().product();
    let found = bytes.len() - header;
    if found != expected {
        return Err(truncated(expected, found));
    }
    let mut payload = bytes;
    payload.drain(..header);
    Ok(IdxFile { dims, payload })
}

/// Reads an IDX image file and its label file (optionally gzip-compressed).
/// Pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx(ip, read_file(ip)?, IDX_IMAGES_MAGIC)?;
    let labels = parse_idx(lp, read_file(lp)?, IDX_LABELS_MAGIC)?;
    if images.dims[0] != labels.dims[0] {
        return Err(DataError::CountMismatch {
            images: images.dims[0],
            labels: labels.dims[0],
        });
    }
    if images.dims[0] == 0 {
        return Err(DataError::Empty);
    }
    let shape = vec![images.dims[0], 1, images.dims[1], images.dims[2]];
    let pixels = images.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let tensor = Tensor::new(shape, pixels)?;
    let labels = labels.payload.into_iter().map(usize::from).collect();
    LabeledDataset::new(tensor, labels, 10, &ip.display().to_string())
}

/// Loads the standard MNIST train and test splits from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let dir = dir.as_ref();
    let find = |name: &str| -> PathBuf {
        let plain = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    let train = load_idx(find(MNIST_TRAIN_IMAGES), find(MNIST_TRAIN_LABELS))?;
    let test = load_idx(find(MNIST_TEST_IMAGES), find(MNIST_TEST_LABELS))?;
    Ok((train, test))
}

/// Writes `[N, 1, rows, cols]` pixel bytes and labels as IDX files.
pub fn write_idx<W: Write>(pixels: &[u8], count: usize, rows: usize, cols: usize, mut w: W) -> std::io::Result<()> {
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [count, rows, cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(pixels)
}

pub fn write_idx_labels<W: Write>(labels: &[u8], mut w: W) -> std::io::Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)
}

/// Uniform sample without replacement of `floor(ratio · N)` items, kept in
/// their original order.
pub fn subsample(ds: &LabeledDataset, ratio: f64, seed: u64) -> Result<LabeledDataset, DataError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let n = (ratio * ds.len() as f64).floor() as usize;
    if n == 0 {
        return Err(DataError::EmptySubset { ratio, len: ds.len() });
    }
    let mut rows = if n == ds.len() {
        (0..n).collect()
    } else {
        index::sample(&mut rng::stream(seed, streams::SUBSAMPLE), ds.len(), n).into_vec()
    };
    rows.sort_unstable();
    let mut out = ds.select(&rows)?;
    out.provenance.subset_ratio = ds.provenance.subset_ratio * ratio;
    out.provenance.seed = Some(seed);
    Ok(out)
}

/// Adds seeded `N(0, σ)` noise to every pixel; labels are untouched and
/// nothing is clipped.
pub fn corrupt(ds: &LabeledDataset, sigma_test: f64, seed: u64) -> Result<LabeledDataset, DataError> {
    if sigma_test.is_nan() || sigma_test < 0.0 {
        return Err(DataError::NegativeSigma(sigma_test));
    }
    let mut out = ds.clone();
    out.provenance.sigma_test = sigma_test;
    out.provenance.seed = Some(seed);
    if sigma_test == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma_test).expect("checked sigma");
    let mut rng = rng::stream(seed, streams::CORRUPT);
    out.images
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Iterator over a shuffled partition of a dataset.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            images: self.ds.images.gather_rows(rows).expect("rows in range"),
            labels: rows.iter().map(|&r| self.ds.labels[r]).collect(),
        })
    }
}

/// Shuffles the sample order with `shuffle_seed` and yields batches of
/// `batch_size`; the last batch may be short.
pub fn batches(ds: &LabeledDataset, batch_size: usize, shuffle_seed: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, streams::SHUFFLE));
    Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    }
}

/// Two isotropic Gaussian blobs in the plane, centred at (−2, −2) and
/// (2, 2) with unit std. Linearly separable with overwhelming probability.
pub fn two_blobs(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng::stream(seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let centre = if label == 0 { -2.0 } else { 2.0 };
        data.push(centre + normal.sample(&mut rng));
        data.push(centre + normal.sample(&mut rng));
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 2], data).expect("finite blobs");
    LabeledDataset::new(images, labels, 2, "two-blobs").expect("labels in range")
}
