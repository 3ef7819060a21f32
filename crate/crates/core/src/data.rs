//! Dataset containers and readers for IDX (MNIST-style) and CIFAR binary
//! batch files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DsgError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Images `[n, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DsgError::dim("dataset", images.shape(), &[0, 0, 0, 0]));
        }
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(DsgError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DsgError::Label {
                index,
                label,
                classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
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

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let len = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels,
        )
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    /// A seeded random subset of `n` samples, keeping the original order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }
}

fn read_u32_be(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_idx(path: &Path, magic: u32, header_len: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(DsgError::Truncated {
            path: path.to_path_buf(),
            needed: 8,
            actual: bytes.len(),
        });
    }
    let found = read_u32_be(&bytes, 0);
    if found != magic {
        return Err(DsgError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(DsgError::Truncated {
            path: path.to_path_buf(),
            needed: header_len,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (1..header_len / 4)
        .map(|i| read_u32_be(&bytes, 4 * i) as usize)
        .collect();
    let needed = header_len + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(DsgError::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok((bytes[header_len..needed].to_vec(), dims))
}

/// Reads an IDX image/label file pair. Pixels are scaled by 1/255 and the
/// class count is taken as 10.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (pixels, dims) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC, 16)?;
    let (labels, ldims) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 8)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(DsgError::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::from_parts(vec![n, 1, h, w], data),
        labels.into_iter().map(usize::from).collect(),
        10,
        Split::Train,
    )
}

/// Loads `train-*` and `t10k-*` IDX files from a Fashion-MNIST directory.
pub fn load_fashion_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train = load_idx(
        d.join("train-images-idx3-ubyte"),
        d.join("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_idx(
        d.join("t10k-images-idx3-ubyte"),
        d.join("t10k-labels-idx1-ubyte"),
    )?;
    test.split = Split::Val;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batch files (1 label byte + 3072 CHW pixel bytes
/// per record).
pub fn load_cifar_batches(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let needed = bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD;
            return Err(DsgError::Truncated {
                path: f.clone(),
                needed,
                actual: bytes.len(),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], data), labels, 10, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
    Ok((
        load_cifar_batches(&train, Split::Train)?,
        load_cifar_batches(&[d.join("test_batch.bin")], Split::Val)?,
    ))
}

/// Picks the reader from the directory contents.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    if d.join("train-images-idx3-ubyte").exists() {
        load_fashion_mnist(d)
    } else if d.join("data_batch_1.bin").exists() {
        load_cifar10_dir(d)
    } else {
        Err(DsgError::Config(format!(
            "{} holds neither IDX nor CIFAR binary files",
            d.display()
        )))
    }
}
