//! IDX and CIFAR-binary readers on hand-built fixtures.

mod common;

use std::fs;

use common::{write_idx_images, write_idx_labels};
use dsg_core::data::{load_cifar_batches, load_dataset_dir, load_idx, Split};
use dsg_core::DsgError;

fn four_images(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let px: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
    let img = dir.join("img");
    let lab = dir.join("lab");
    write_idx_images(&img, &px, 4, 2, 3);
    write_idx_labels(&lab, &[3, 0, 9, 1]);
    (img, lab)
}

#[test]
fn reads_a_four_image_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = four_images(dir.path());
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.images().shape(), &[4, 1, 2, 3]);
    assert_eq!(ds.labels(), &[3, 0, 9, 1]);
    // pixel 7 is 70/255
    assert!((ds.images().data()[7] - 70.0 / 255.0).abs() < 1e-7);
    let (x, y) = ds.batch(&[2]);
    assert_eq!(x.shape(), &[1, 1, 2, 3]);
    assert_eq!(y, vec![9]);
}

#[test]
fn malformed_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = four_images(dir.path());

    let mut bytes = fs::read(&img).unwrap();
    bytes[3] = 0x01;
    let bad = dir.path().join("bad_magic");
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_idx(&bad, &lab), Err(DsgError::BadMagic { found: 0x0801, .. })));

    let short = dir.path().join("short");
    fs::write(&short, &fs::read(&img).unwrap()[..20]).unwrap();
    assert!(matches!(load_idx(&short, &lab), Err(DsgError::Truncated { needed: 40, actual: 20, .. })));

    let three = dir.path().join("three_labels");
    write_idx_labels(&three, &[1, 2, 3]);
    assert!(matches!(
        load_idx(&img, &three),
        Err(DsgError::CountMismatch { images: 4, labels: 3 })
    ));

    let big = dir.path().join("big_label");
    write_idx_labels(&big, &[1, 2, 10, 3]);
    assert!(matches!(load_idx(&img, &big), Err(DsgError::Label { index: 2, label: 10, .. })));

    assert!(matches!(load_idx(dir.path().join("missing"), &lab), Err(DsgError::Io(_))));
    assert!(matches!(load_dataset_dir(dir.path()), Err(DsgError::Config(_))));
}

#[test]
fn reads_cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![0u8; 2 * 3073];
    rec[0] = 4;
    rec[1] = 255;
    rec[3073] = 7;
    let f = dir.path().join("b.bin");
    fs::write(&f, &rec).unwrap();
    let ds = load_cifar_batches(&[f.clone()], Split::Val).unwrap();
    assert_eq!(ds.labels(), &[4, 7]);
    assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
    assert_eq!(ds.images().data()[0], 1.0);

    fs::write(&f, &rec[..3000]).unwrap();
    assert!(matches!(load_cifar_batches(&[f], Split::Val), Err(DsgError::Truncated { .. })));
}
