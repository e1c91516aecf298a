//! IDX (MNIST) ingestion and seeded minibatching.
//!
//! IDX layout: a big-endian magic `0x0000TTDD` (`TT = 0x08` for unsigned
//! bytes, `DD` = number of dimensions), `DD` big-endian `u32` sizes, then the
//! raw bytes. Files may be gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;

/// RNG substream used for minibatch shuffling.
pub const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn parse_idx(raw: &[u8], expected_magic: u32) -> Result<IdxArray> {
    if raw.len() < 4 {
        return Err(Error::Length(format!("IDX file has {} bytes, shorter than its magic", raw.len())));
    }
    let magic = u32::from_be_bytes(raw[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::Format(format!("IDX magic {magic} (expected {expected_magic})")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if raw.len() < header {
        return Err(Error::Length(format!("IDX header needs {header} bytes, file has {}", raw.len())));
    }
    let dims: Vec<usize> = raw[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let body: usize = dims.iter().product();
    let found = raw.len() - header;
    if found != body {
        return Err(Error::Length(format!("IDX payload is {found} bytes, header declares {body}")));
    }
    Ok(IdxArray {
        dims,
        bytes: raw[header..].to_vec(),
    })
}

/// Read a file, transparently inflating gzip (`1f 8b` prefix).
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images `[n, 1, rows, cols]` scaled to `[0, 1]` and shifted by a scalar
/// mean, with their integer labels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Scaled-pixel mean that was subtracted.
    pub mean: f64,
    /// Sum of every raw pixel byte, for decode-drift checks.
    pub pixel_checksum: u64,
}

impl<T: Scalar> Dataset<T> {
    /// Build from raw IDX arrays. `mean = None` uses this split's own mean.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray, split: Split, mean: Option<f64>) -> Result<Self> {
        if images.dims.len() != 3 {
            return Err(Error::Format(format!("image array has {} dimensions, expected 3", images.dims.len())));
        }
        if labels.dims.len() != 1 {
            return Err(Error::Format(format!("label array has {} dimensions, expected 1", labels.dims.len())));
        }
        let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
        if labels.dims[0] != n {
            return Err(Error::Consistency(format!("{n} images but {} labels", labels.dims[0])));
        }
        if let Some(bad) = labels.bytes.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Consistency(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        let pixel_checksum = images.bytes.iter().map(|&b| b as u64).sum::<u64>();
        let mean = match mean {
            Some(m) => m,
            None if images.bytes.is_empty() => 0.0,
            None => pixel_checksum as f64 / 255.0 / images.bytes.len() as f64,
        };
        let data = images.bytes.iter().map(|&b| T::of(b as f64 / 255.0 - mean)).collect();
        Ok(Self {
            images: Tensor::new(vec![n, 1, rows, cols], data)?,
            labels: labels.bytes.iter().map(|&l| l as usize).collect(),
            split,
            mean,
            pixel_checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copy the given samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered shape"), labels)
    }

    /// First `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        if n >= self.len() {
            return self;
        }
        let (images, labels) = self.gather(&(0..n).collect::<Vec<_>>());
        self.images = images;
        self.labels = labels;
        self
    }
}

/// Parse an images/labels file pair.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path, split: Split, mean: Option<f64>) -> Result<Dataset<T>> {
    let images = parse_idx(&read_maybe_gz(images_path)?, IMAGES_MAGIC)?;
    let labels = parse_idx(&read_maybe_gz(labels_path)?, LABELS_MAGIC)?;
    Dataset::from_idx(&images, &labels, split, mean)
}

/// Locate `<prefix>-{images,labels}-idx{3,1}-ubyte[.gz]` in `dir`.
pub fn split_paths(dir: &Path, split: Split) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let find = |stem: String| {
        let plain = dir.join(&stem);
        let gz = dir.join(format!("{stem}.gz"));
        if plain.exists() {
            Ok(plain)
        } else if gz.exists() {
            Ok(gz)
        } else {
            Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset file {} not found", plain.display()),
            )))
        }
    };
    Ok((
        find(format!("{}-images-idx3-ubyte", split.prefix()))?,
        find(format!("{}-labels-idx1-ubyte", split.prefix()))?,
    ))
}

/// Train and test splits, both centered with the training mean.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let (ti, tl) = split_paths(dir, Split::Train)?;
    let train: Dataset<T> = load_idx(&ti, &tl, Split::Train, None)?;
    let (vi, vl) = split_paths(dir, Split::Test)?;
    let test = load_idx(&vi, &vl, Split::Test, Some(train.mean))?;
    Ok((train, test))
}

/// Encode bytes as an IDX file (used to write fixtures and subsets).
pub fn encode_idx(magic: u32, dims: &[usize], bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + bytes.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(bytes);
    out
}

/// Endless stream of shuffled minibatch indices; reshuffles at every epoch
/// boundary and keeps the final short batch.
#[derive(Debug, Clone)]
pub struct Batches {
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::EmptyDataset("cannot batch zero samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            batch_size,
            order: (0..n).collect(),
            pos: n,
            epoch: 0,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// All batches of the next full epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.pos = self.order.len();
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> (IdxArray, IdxArray) {
        let images = parse_idx(&encode_idx(IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 0, 255, 255, 255, 0, 0]), IMAGES_MAGIC).unwrap();
        let labels = parse_idx(&encode_idx(LABELS_MAGIC, &[2], &[3, 9]), LABELS_MAGIC).unwrap();
        (images, labels)
    }

    #[test]
    fn decodes_and_centers() {
        let (images, labels) = tiny();
        let ds: Dataset<f64> = Dataset::from_idx(&images, &labels, Split::Train, None).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.mean, 0.5);
        assert_eq!(ds.images.data()[1], 0.5);
        assert_eq!(ds.pixel_checksum, 4 * 255);
        let fixed: Dataset<f64> = Dataset::from_idx(&images, &labels, Split::Test, Some(0.25)).unwrap();
        assert_eq!(fixed.images.data()[1], 0.75);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let good = encode_idx(LABELS_MAGIC, &[3], &[1, 2, 3]);
        assert!(matches!(parse_idx(&good, IMAGES_MAGIC), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&good[..good.len() - 1], LABELS_MAGIC), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&good[..6], LABELS_MAGIC), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&good[..2], LABELS_MAGIC), Err(Error::Length(_))));
    }

    #[test]
    fn count_mismatch_and_bad_labels() {
        let (images, _) = tiny();
        let three = parse_idx(&encode_idx(LABELS_MAGIC, &[3], &[1, 2, 3]), LABELS_MAGIC).unwrap();
        assert!(matches!(Dataset::<f64>::from_idx(&images, &three, Split::Train, None), Err(Error::Consistency(_))));
        let bad = parse_idx(&encode_idx(LABELS_MAGIC, &[2], &[1, 10]), LABELS_MAGIC).unwrap();
        assert!(matches!(Dataset::<f64>::from_idx(&images, &bad, Split::Train, None), Err(Error::Consistency(_))));
    }

    #[test]
    fn batch_sizes() {
        let mut b = Batches::new(10, 3, 1).unwrap();
        let sizes: Vec<usize> = b.next_epoch().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(Batches::new(10, 0, 1).is_err());
        assert!(Batches::new(0, 4, 1).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Batches::new(50, 7, 42).unwrap();
        let mut b = Batches::new(50, 7, 42).unwrap();
        for _ in 0..30 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut c = Batches::new(50, 7, 43).unwrap();
        assert_ne!(Batches::new(50, 7, 42).unwrap().next_epoch(), c.next_epoch());
    }

    #[test]
    fn gather_copies_samples() {
        let (images, labels) = tiny();
        let ds: Dataset<f64> = Dataset::from_idx(&images, &labels, Split::Train, Some(0.0)).unwrap();
        let (x, y) = ds.gather(&[1, 0, 1]);
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
        assert_eq!(&x.data()[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(y, vec![9, 3, 9]);
    }

    proptest! {
        #[test]
        fn every_epoch_is_a_permutation(n in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
            let mut b = Batches::new(n, bs, seed).unwrap();
            for _ in 0..3 {
                let mut seen: Vec<usize> = b.next_epoch().concat();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
