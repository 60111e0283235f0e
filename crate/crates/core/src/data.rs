//! Datasets: IDX (MNIST container) parsing, a synthetic Gaussian-blob
//! generator, sharding across pairs and per-epoch batching.
//!
//! IDX layout, all integers big-endian u32:
//!
//! ```text
//! images: 0x00000803 | count | rows | cols | count*rows*cols pixel bytes
//! labels: 0x00000801 | count | count label bytes
//! ```
//!
//! Pixels are normalized by 1/255 on load.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-major image matrix plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    shape: [usize; 2],
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, shape: [usize; 2], split: Split) -> Result<Self> {
        let dim = shape[0] * shape[1];
        if dim == 0 {
            return Err(Error::config("image dimension must be positive"));
        }
        if images.len() != labels.len() * dim {
            return Err(Error::config(format!(
                "{} pixel values do not fill {} images of dimension {dim}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self {
            images,
            labels,
            shape,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }

    /// First `n` samples (or all of them when fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            split: self.split,
        }
    }

    /// New dataset holding the listed samples in order.
    pub fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let (x, labels) = self.gather(indices);
        Dataset {
            images: x.into_vec(),
            labels,
            shape: self.shape,
            split,
        }
    }

    /// Copies the listed samples into a batch matrix and label vector.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u8>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let x =
            Matrix::from_vec(indices.len(), d, data).expect("gathered buffer matches its shape");
        (x, labels)
    }

    /// Serializes back to IDX, quantizing pixels to the nearest 1/255 step.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.len() as u32;
        let mut images = Vec::with_capacity(16 + self.images.len());
        images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&n.to_be_bytes());
        images.extend_from_slice(&(self.shape[0] as u32).to_be_bytes());
        images.extend_from_slice(&(self.shape[1] as u32).to_be_bytes());
        images.extend(
            self.images
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        let mut labels = Vec::with_capacity(8 + self.labels.len());
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&n.to_be_bytes());
        labels.extend_from_slice(&self.labels);
        (images, labels)
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: format!("file truncated while reading {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0, "magic number")?;
    if found != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic 0x{found:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file into normalized pixels and the image shape.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, [usize; 2])> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 8,
            message: format!("degenerate image shape {rows}x{cols}"),
        });
    }
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!(
                "file truncated: header promises {need} pixel bytes, {} present",
                body.len()
            ),
        });
    }
    if body.len() > need {
        return Err(Error::Parse {
            offset: 16 + need,
            message: format!("{} trailing bytes", body.len() - need),
        });
    }
    Ok((
        body.iter().map(|&b| b as f64 / 255.0).collect(),
        count,
        [rows, cols],
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!(
                "file truncated: header promises {count} labels, {} present",
                body.len()
            ),
        });
    }
    if body.len() > count {
        return Err(Error::Parse {
            offset: 8 + count,
            message: format!("{} trailing bytes", body.len() - count),
        });
    }
    if let Some(pos) = body.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Parse {
            offset: 8 + pos,
            message: format!("label {} out of range 0..{NUM_CLASSES}", body[pos]),
        });
    }
    Ok(body.to_vec())
}

pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (pixels, count, shape) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!(
                "label file holds {} items but image file holds {count}",
                labels.len()
            ),
        });
    }
    Dataset::new(pixels, labels, shape, split)
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels, split)
}

/// Loads the four standard MNIST files from `dir` as (train, test).
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join(MNIST_TRAIN_IMAGES),
        dir.join(MNIST_TRAIN_LABELS),
        Split::Train,
    )?;
    let test = load_idx(
        dir.join(MNIST_TEST_IMAGES),
        dir.join(MNIST_TEST_LABELS),
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shape: [usize; 2],
    /// Standard deviation of per-pixel Gaussian noise around a class center.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: NUM_CLASSES,
            shape: [28, 28],
            noise: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn dim(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// Class centers, uniform in the unit cube.
    pub fn centers(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, Stream::SyntheticCenters);
        (0..self.classes)
            .map(|_| (0..self.dim()).map(|_| rng.random::<f64>()).collect())
            .collect()
    }
}

fn sample_blobs(
    spec: &SyntheticSpec,
    centers: &[Vec<f64>],
    per_class: usize,
    stream: Stream,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > NUM_CLASSES {
        return Err(Error::config(format!(
            "synthetic class count must be in 1..={NUM_CLASSES}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config(
            "synthetic noise must be finite and non-negative",
        ));
    }
    let mut rng = stream_rng(seed, stream);
    let mut images = Vec::with_capacity(spec.classes * per_class * spec.dim());
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for _ in 0..per_class {
        for (class, center) in centers.iter().enumerate() {
            for &c in center {
                let n: f64 = rng.sample(StandardNormal);
                images.push((c + spec.noise * n).clamp(0.0, 1.0));
            }
            labels.push(class as u8);
        }
    }
    Dataset::new(images, labels, spec.shape, split)
}

/// Gaussian blobs around one center per class, clamped to [0, 1].
pub fn make_synthetic(spec: &SyntheticSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    sample_blobs(
        spec,
        &spec.centers(seed),
        per_class,
        Stream::SyntheticSamples,
        seed,
        Split::Train,
    )
}

/// Train and test sets drawn independently around shared centers.
pub fn make_synthetic_pair(
    spec: &SyntheticSpec,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let centers = spec.centers(seed);
    let train = sample_blobs(
        spec,
        &centers,
        train_per_class,
        Stream::SyntheticSamples,
        seed,
        Split::Train,
    )?;
    let test = sample_blobs(
        spec,
        &centers,
        test_per_class,
        Stream::SyntheticTestSamples,
        seed,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Fraction of samples whose nearest center (Euclidean) is their own class.
pub fn nearest_centroid_accuracy(data: &Dataset, centers: &[Vec<f64>]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.image(i);
            let best = centers
                .iter()
                .map(|c| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(data.labels()[i] as usize)
        })
        .count();
    correct as f64 / data.len() as f64
}

/// One pair's slice of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shard {
    pub pair_id: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded shuffle of `0..samples`, cut into `pairs` contiguous pieces whose
/// sizes differ by at most one (the first `samples % pairs` get the extra).
pub fn shard(samples: usize, pairs: usize, seed: u64) -> Result<Vec<Shard>> {
    if pairs == 0 {
        return Err(Error::config("at least one pair is required"));
    }
    if pairs > samples {
        return Err(Error::config(format!(
            "{pairs} pairs but only {samples} samples"
        )));
    }
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Sharding));
    let base = samples / pairs;
    let extra = samples % pairs;
    let mut start = 0;
    Ok((0..pairs)
        .map(|pair_id| {
            let len = base + usize::from(pair_id < extra);
            let indices = order[start..start + len].to_vec();
            start += len;
            Shard { pair_id, indices }
        })
        .collect())
}

/// How one shard is cut into batches each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchPlan {
    pub batches: usize,
    pub batch_size: usize,
}

impl BatchPlan {
    /// Batch size `shard_len / batches` (remainder dropped) unless fixed.
    pub fn new(shard_len: usize, batches: usize, fixed_size: Option<usize>) -> Result<Self> {
        if batches == 0 {
            return Err(Error::config("batch count must be positive"));
        }
        let batch_size = match fixed_size {
            Some(0) => return Err(Error::config("batch size must be positive")),
            Some(s) => s,
            None => shard_len / batches,
        };
        if batch_size == 0 {
            return Err(Error::config(format!(
                "{batches} batches do not fit a shard of {shard_len} samples"
            )));
        }
        Ok(Self {
            batches,
            batch_size,
        })
    }

    /// Indices of batch `b` taken from an epoch ordering. A fixed batch size
    /// that overruns the shard wraps around to its start.
    pub fn batch(&self, order: &[usize], b: usize) -> Vec<usize> {
        let start = b * self.batch_size;
        (start..start + self.batch_size)
            .map(|i| order[i % order.len()])
            .collect()
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.batches * self.batch_size
    }
}
