//! MNIST IDX files: big-endian header, unsigned byte payload.

use std::path::Path;

use super::LabeledDataset;
use crate::container::{read_file, write_file};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::IdxDims("file too short for IDX header".into()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::IdxDims(format!(
            "header declares {n}x{rows}x{cols} = {} pixels, file has {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic { expected: LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::IdxDims(format!("header declares {n} labels, file has {}", body.len())));
    }
    Ok(body)
}

/// Loads an MNIST image/label file pair; pixels are scaled by `1/255`.
pub fn load_mnist<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<T>> {
    let img_bytes = read_file(images_path)?;
    let lab_bytes = read_file(labels_path)?;
    let (n, rows, cols, pixels) = parse_images(&img_bytes)?;
    let labels = parse_labels(&lab_bytes)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 9) {
        return Err(Error::Format(format!("label {bad} outside 0..=9")));
    }
    let scale = T::lit(255.0);
    let data: Vec<T> = pixels.iter().map(|&p| T::lit(p as f64) / scale).collect();
    let name = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.iter().map(|&y| y as usize).collect(),
        name,
    )
}

/// Loads the standard MNIST file pair for the train or test split from `dir`.
pub fn load_mnist_dir<T: Scalar>(dir: &Path, train: bool) -> Result<LabeledDataset<T>> {
    let (i, l) = if train { (TRAIN_IMAGES, TRAIN_LABELS) } else { (TEST_IMAGES, TEST_LABELS) };
    let mut ds = load_mnist(&dir.join(i), &dir.join(l))?;
    ds.name = if train { "mnist-train".into() } else { "mnist-test".into() };
    Ok(ds)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an IDX pair; used for fixtures and exporting subsets.
pub fn write_mnist(images_path: &Path, labels_path: &Path, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    write_file(images_path, &encode_images(rows, cols, pixels))?;
    write_file(labels_path, &encode_labels(labels))
}
