//! CIFAR binary batches and MNIST IDX files.
//!
//! Directory layouts:
//! - CIFAR-10: `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin`
//!   (directly in the given directory or in its `cifar-10-batches-bin/`).
//! - CIFAR-100: `train.bin` and `test.bin` (or under `cifar-100-binary/`).
//! - MNIST: `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//!   `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, uncompressed.

use std::path::{Path, PathBuf};

use deeptraverse_core::data::{Dataset, Split};
use deeptraverse_core::Tensor;

use crate::error::{read, AppError, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

/// The two CIFAR label layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Ten,
    /// Coarse then fine label byte per record; the fine label is used.
    Hundred,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::Ten, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (CifarVariant::Ten, Split::Test) => vec!["test_batch.bin".into()],
            (CifarVariant::Hundred, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::Hundred, Split::Test) => vec!["test.bin".into()],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Ten => "cifar-10-batches-bin",
            CifarVariant::Hundred => "cifar-100-binary",
        }
    }

    /// Records per file, where the format fixes it.
    fn expected_records(self, split: Split) -> Option<usize> {
        match (self, split) {
            (CifarVariant::Ten, _) => Some(CIFAR_BATCH_RECORDS),
            (CifarVariant::Hundred, Split::Train) => Some(50_000),
            (CifarVariant::Hundred, Split::Test) => Some(10_000),
        }
    }
}

/// Pixels and labels of one parsed CIFAR file, pixels still as bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecords {
    pub variant: CifarVariant,
    /// Coarse labels; empty for CIFAR-10.
    pub coarse: Vec<u8>,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<CifarRecords> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(AppError::format(
            path,
            format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut out = CifarRecords {
        variant,
        coarse: Vec::new(),
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * CIFAR_PIXELS),
    };
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1];
        if label as usize >= variant.num_classes() {
            return Err(AppError::format(
                path,
                format!("record {i} has label {label}; labels must be < {}", variant.num_classes()),
            ));
        }
        if variant == CifarVariant::Hundred {
            out.coarse.push(r[0]);
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Ok(out)
}

/// Inverse of [`parse_cifar`].
pub fn encode_cifar(records: &CifarRecords) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.labels.len() * records.variant.record_len());
    for (i, (&label, px)) in records.labels.iter().zip(records.pixels.chunks_exact(CIFAR_PIXELS)).enumerate() {
        if records.variant == CifarVariant::Hundred {
            out.push(records.coarse[i]);
        }
        out.push(label);
        out.extend_from_slice(px);
    }
    out
}

fn resolve_dir(dir: &Path, variant: CifarVariant) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(AppError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let nested = dir.join(variant.subdir());
    Ok(if nested.is_dir() { nested } else { dir.to_path_buf() })
}

fn to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

pub fn load_cifar(dir: &Path, split: Split, variant: CifarVariant) -> Result<Dataset> {
    let dir = resolve_dir(dir, variant)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in variant.files(split) {
        let path = dir.join(&name);
        let bytes = read(&path)?;
        if let Some(n) = variant.expected_records(split) {
            let expected = n * variant.record_len();
            if bytes.len() != expected {
                return Err(AppError::format(
                    &path,
                    format!("expected {expected} bytes ({n} records of {}), found {}", variant.record_len(), bytes.len()),
                ));
            }
        }
        let recs = parse_cifar(&bytes, variant, &path)?;
        labels.extend(recs.labels.iter().map(|&l| l as usize));
        pixels.extend(to_unit(&recs.pixels));
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Ok(Dataset::new(images, labels, variant.num_classes(), split)?)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar(dir, split, CifarVariant::Ten)
}

pub fn load_cifar100(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar(dir, split, CifarVariant::Hundred)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an IDX image file: magic, count, rows, columns (big-endian u32), then pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(AppError::format(path, format!("{} bytes is too short for an IDX image header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(AppError::format(path, format!("bad magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(AppError::format(path, format!("header promises {expected} bytes, found {}", bytes.len())));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file: magic, count (big-endian u32), then one byte per label.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(AppError::format(path, format!("{} bytes is too short for an IDX label header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(AppError::format(path, format!("bad magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(AppError::format(path, format!("header promises {} bytes, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [MNIST_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn mnist_files(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(AppError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let (img_name, lbl_name) = mnist_files(split);
    let img_path = dir.join(img_name);
    let lbl_path = dir.join(lbl_name);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(AppError::format(&lbl_path, format!("{} labels for {n} images in {}", labels.len(), img_path.display())));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(AppError::format(&lbl_path, format!("label {l} at index {i}; labels must be < 10")));
    }
    let images = Tensor::from_vec(&[n, 1, rows, cols], to_unit(&pixels))?;
    Ok(Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)?)
}
