//! Helpers shared by integration tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsg_core::data::{Dataset, Split};
use dsg_core::Tensor;

/// Uniform `[0, 1)` images labelled by the nearest of `classes` random
/// prototypes, so the task is learnable.
pub fn synthetic(n: usize, shape: [usize; 3], classes: usize, seed: u64, split: Split) -> Dataset {
    let (images, labels) = synthetic_raw(n, shape, classes, seed);
    let mut full = vec![n];
    full.extend(shape);
    let data = images.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(Tensor::new(full, data).unwrap(), labels, classes, split).unwrap()
}

/// Byte pixels and labels for the synthetic task.
pub fn synthetic_raw(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> (Vec<u8>, Vec<usize>) {
    let d: usize = shape.iter().product();
    // prototypes come from a fixed stream so that train and val share them
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let proto: Vec<f32> = (0..classes * d).map(|_| proto_rng.gen_range(-1.0..1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<u8> = (0..d).map(|_| rng.gen()).collect();
        let score = |c: usize| {
            x.iter()
                .zip(&proto[c * d..(c + 1) * d])
                .map(|(&a, b)| (a as f32 - 127.5) * b)
                .sum::<f32>()
        };
        let y = (0..classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        images.extend(x);
        labels.push(y);
    }
    (images, labels)
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, h: usize, w: usize) {
    let mut b = Vec::new();
    for v in [0x0000_0803u32, n as u32, h as u32, w as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    fs::write(path, b).unwrap();
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) {
    let mut b = Vec::new();
    for v in [0x0000_0801u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, b).unwrap();
}

/// A Fashion-MNIST-shaped IDX directory of synthetic 28×28 images.
pub fn fake_fashion_dir(dir: &Path, n_train: usize, n_test: usize) -> PathBuf {
    let shape = [1, 28, 28];
    for (prefix, n, seed) in [("train", n_train, 1), ("t10k", n_test, 2)] {
        let (px, labels) = synthetic_raw(n, shape, 10, seed);
        write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), &px, n, 28, 28);
        write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels);
    }
    dir.to_path_buf()
}
